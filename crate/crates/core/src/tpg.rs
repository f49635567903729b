//! Two-point-gradient Kaczmarz iteration with a convex penalty, and its
//! Landweber-Kaczmarz special case (no extrapolation).
//!
//! One sweep visits the currents in order `0..I`. Sub-step `i` extrapolates the
//! dual, `ζ = ξ + λ(ξ - ξ_prev)`, maps it to a conductivity `z = ∇Θ*(ζ)`, and
//! takes a gradient step on `‖H_i(z) - y_i‖^{q/2}`:
//! `ξ⁺ = ζ - μ H_i'(z)* J_{q/2}(H_i(z) - y_i)`, `σ⁺ = ∇Θ*(ξ⁺)`.
//! The iteration stops at the first sweep in which every step size is zero,
//! i.e. every residual is within `τδ_i`.

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::error::AlgoError;
use crate::fem::{ElementField, NodalField};
use crate::metrics::{psnr, rel_err_l1, Psnr};
use crate::operator::{duality_map, norm_x, norm_y, ForwardModel};
use crate::penalty::{Penalty, ProxWorkspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Two-point gradient: Nesterov-type extrapolation between sub-steps.
    Tpg,
    /// Landweber-Kaczmarz: the combination parameter is always zero.
    Landweber,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgoConfig {
    /// Residual exponent; the data space is `L^{q/2}`.
    pub q: f64,
    /// Discrepancy constant, `τ > 1`.
    pub tau: f64,
    pub mu0: f64,
    pub mu1: f64,
    /// Nesterov offset in `n/(n + α)`.
    pub alpha: f64,
    /// Constant `M` bounding the extrapolation against `τ²δ²`.
    pub m: f64,
    pub max_sweeps: usize,
    pub mode: Mode,
    /// Constant initial dual `ξ_{-1} = ξ_0`.
    pub initial_dual: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Tangential-cone constant, only used for the `c₁` diagnostic.
    pub eta: Option<f64>,
    /// Convergence-theory constant `ν`, only used for the implied-`M` diagnostic.
    pub nu: Option<f64>,
    /// Bound `C_H` on `‖H'(σ)‖`, only used for the implied-`M` diagnostic.
    pub c_h: Option<f64>,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        let tau = 1.05;
        Self {
            q: 2.2,
            tau,
            mu0: 1.8 * (1.0 - 1.0 / tau),
            mu1: 1.0,
            alpha: 3.0,
            m: 1.0,
            max_sweeps: 1000,
            mode: Mode::Tpg,
            initial_dual: 1.0,
            sigma_min: crate::fem::SIGMA_MIN,
            sigma_max: crate::fem::SIGMA_MAX,
            eta: None,
            nu: None,
            c_h: None,
        }
    }
}

impl AlgoConfig {
    pub fn validate(&self) -> Result<(), AlgoError> {
        let bad = |m: String| Err(AlgoError::Config(m));
        if !(self.q > 2.0) {
            return bad(format!("q must exceed 2, got {}", self.q));
        }
        if !(self.tau > 1.0) {
            return bad(format!("tau must exceed 1, got {}", self.tau));
        }
        if !(self.mu0 > 0.0 && self.mu1 > 0.0) {
            return bad(format!("step constants must be positive, got mu0 = {}, mu1 = {}", self.mu0, self.mu1));
        }
        if !(self.alpha >= 3.0) {
            return bad(format!("alpha must be at least 3, got {}", self.alpha));
        }
        if !(self.m > 0.0) {
            return bad(format!("m must be positive, got {}", self.m));
        }
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min) {
            return bad(format!("clamp bounds [{}, {}] are invalid", self.sigma_min, self.sigma_max));
        }
        for (name, v) in [("eta", self.eta), ("nu", self.nu), ("c_h", self.c_h)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return bad(format!("{name} must be a finite non-negative number, got {v}"));
                }
            }
        }
        if self.max_sweeps == 0 {
            return bad("max_sweeps must be positive".into());
        }
        Ok(())
    }

    /// `c₁ = 1 - η - (1 + η)/τ - μ̄₀/(4c₀)`, positive when the descent estimate applies.
    pub fn c1(&self, c0: f64) -> f64 {
        let eta = self.eta.unwrap_or(0.0);
        1.0 - eta - (1.0 + eta) / self.tau - self.mu0 / (4.0 * c0)
    }

    /// `(c₁/ν) min{μ̄₀/C_H², μ̄₁}` when `ν` and `C_H` are known; `c_h` overrides the configured bound.
    pub fn implied_m(&self, c0: f64, c_h: Option<f64>) -> Option<f64> {
        let nu = self.nu?;
        let ch = c_h.or(self.c_h)?;
        if !(nu > 0.0 && ch > 0.0) {
            return None;
        }
        Some(self.c1(c0) / nu * (self.mu0 / (ch * ch)).min(self.mu1))
    }
}

/// Step size: zero inside the discrepancy band, otherwise
/// `min{μ̄₀‖r‖^{2(q/2-1)} / ‖H'*J(r)‖², μ̄₁} ‖r‖^{2-q/2}`.
pub fn step_size(r_norm: f64, grad_dual_norm: f64, delta: f64, cfg: &AlgoConfig) -> f64 {
    if r_norm <= cfg.tau * delta || r_norm == 0.0 {
        return 0.0;
    }
    let p = cfg.q / 2.0;
    let ratio = if grad_dual_norm > 0.0 {
        cfg.mu0 * r_norm.powf(2.0 * (p - 1.0)) / (grad_dual_norm * grad_dual_norm)
    } else {
        f64::INFINITY
    };
    ratio.min(cfg.mu1) * r_norm.powf(2.0 - p)
}

/// Combination parameter
/// `min{-1/2 + sqrt(1/4 + 4c₀Mτ²δ²/‖ξ_i - ξ_{i-1}‖²), n/(n + α)}`; zero in Landweber mode.
pub fn combination_param(n: usize, diff_norm: f64, delta: f64, c0: f64, cfg: &AlgoConfig) -> f64 {
    if cfg.mode == Mode::Landweber {
        return 0.0;
    }
    let nesterov = n as f64 / (n as f64 + cfg.alpha);
    if diff_norm == 0.0 {
        return nesterov;
    }
    let ratio = 4.0 * c0 * cfg.m * (cfg.tau * delta).powi(2) / (diff_norm * diff_norm);
    (-0.5 + (0.25 + ratio).sqrt()).min(nesterov)
}

/// Dual pair carried by the iteration; `sigma = ∇Θ*(xi_curr)` always.
#[derive(Debug, Clone, PartialEq)]
pub struct IterState {
    pub xi_prev: NodalField,
    pub xi_curr: NodalField,
    pub sigma: NodalField,
    /// Index of the next sweep.
    pub sweep: usize,
}

impl IterState {
    pub fn from_dual(penalty: &Penalty<'_>, xi: NodalField) -> Result<Self, AlgoError> {
        let sigma = penalty.prox(&xi)?;
        Ok(Self { xi_prev: xi.clone(), xi_curr: xi, sigma, sweep: 0 })
    }
}

/// Measured data for every current with its noise bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub data: Vec<ElementField>,
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubstepRecord {
    pub sweep: usize,
    pub substep: usize,
    pub residual: f64,
    pub lambda: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub sweep: usize,
    /// `R_n = Σ_i ‖r_{n,i}‖²`.
    pub residual_sq_sum: f64,
    /// `D_{ξ_n}Θ(σ†, σ_n)` at the start of the sweep.
    pub bregman: Option<f64>,
    pub e_l1: Option<f64>,
    pub psnr: Option<Psnr>,
    /// Running `Σ λ_{n,i} ‖ξ_{n,i} - ξ_{n,i-1}‖`.
    pub lambda_sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub sigma: NodalField,
    pub n_delta: usize,
    pub converged: bool,
    pub substeps: Vec<SubstepRecord>,
    pub sweeps: Vec<SweepRecord>,
    /// Bregman distance to the truth at the returned iterate.
    pub final_bregman: Option<f64>,
    pub final_state: IterState,
}

/// Runs the Kaczmarz iteration on a fixed mesh.
pub struct Solver<'a, 'm> {
    model: &'a ForwardModel<'m>,
    penalty: &'a Penalty<'m>,
    cfg: AlgoConfig,
    ws: ProxWorkspace,
}

impl<'a, 'm> Solver<'a, 'm> {
    pub fn new(model: &'a ForwardModel<'m>, penalty: &'a Penalty<'m>, cfg: AlgoConfig) -> Result<Self, AlgoError> {
        cfg.validate()?;
        if model.options().sigma_min != cfg.sigma_min || model.options().sigma_max != cfg.sigma_max {
            warn!("forward model clamp differs from algorithm clamp; using the model's");
        }
        let c1 = cfg.c1(penalty.spec().c0());
        if c1 <= 0.0 {
            warn!("c1 = {c1:.4} is not positive; monotone descent is not guaranteed by the theory");
        }
        if let Some(m) = cfg.implied_m(penalty.spec().c0(), None) {
            info!("implied M = {m:.4e} (configured {})", cfg.m);
        }
        Ok(Self { model, penalty, cfg, ws: ProxWorkspace::default() })
    }

    pub fn config(&self) -> &AlgoConfig {
        &self.cfg
    }

    pub fn initial_state(&mut self) -> Result<IterState, AlgoError> {
        let xi = NodalField::constant(self.model.mesh(), self.cfg.initial_dual);
        let sigma = self.penalty.prox_with(&xi, &mut self.ws)?;
        Ok(IterState { xi_prev: xi.clone(), xi_curr: xi, sigma, sweep: 0 })
    }

    /// One Kaczmarz sweep. On error the input state is left untouched.
    pub fn sweep(
        &mut self,
        state: &IterState,
        obs: &Observations,
    ) -> Result<(IterState, Vec<SubstepRecord>, f64), AlgoError> {
        let mesh = self.model.mesh();
        let count = self.model.current_count();
        if obs.data.len() != count || obs.delta.len() != count {
            return Err(AlgoError::Config(format!(
                "expected data for {count} currents, got {} fields and {} noise levels",
                obs.data.len(),
                obs.delta.len()
            )));
        }
        let c0 = self.penalty.spec().c0();
        let n = state.sweep;
        let mut next = state.clone();
        let mut records = Vec::with_capacity(count);
        let mut lambda_mass = 0.0;

        for i in 0..count {
            let delta = obs.delta[i];
            let diff = next.xi_curr.sub(&next.xi_prev);
            let diff_norm = norm_x(mesh, &diff)?;
            let lambda = combination_param(n, diff_norm, delta, c0, &self.cfg);
            let (zeta, z) = if lambda == 0.0 || diff_norm == 0.0 {
                (next.xi_curr.clone(), next.sigma.clone())
            } else {
                let zeta = next.xi_curr.axpy(lambda, &diff);
                let z = self.penalty.prox_with(&zeta, &mut self.ws)?;
                (zeta, z)
            };

            let (h, cache) = self.model.forward_subset(&z, &[i])?;
            let residual = h[0].sub(&obs.data[i]);
            let r_norm = norm_y(mesh, &residual, self.cfg.q)?;

            if r_norm <= self.cfg.tau * delta {
                records.push(SubstepRecord { sweep: n, substep: i, residual: r_norm, lambda: 0.0, mu: 0.0 });
                continue;
            }
            let j = duality_map(&residual, self.cfg.q)?;
            let grad = self.model.adjoint_apply(&z, &cache, i, &j)?;
            let grad_norm = norm_x(mesh, &grad)?;
            let mu = step_size(r_norm, grad_norm, delta, &self.cfg);

            let xi_new = zeta.axpy(-mu, &grad);
            let sigma_new = self.penalty.prox_with(&xi_new, &mut self.ws)?;
            lambda_mass += lambda * diff_norm;
            next.xi_prev = std::mem::replace(&mut next.xi_curr, xi_new);
            next.sigma = sigma_new;
            records.push(SubstepRecord { sweep: n, substep: i, residual: r_norm, lambda, mu });
        }
        next.sweep = n + 1;
        Ok((next, records, lambda_mass))
    }

    /// Iterates until the discrepancy principle stops the sweep loop or
    /// `max_sweeps` is reached. `truth` enables Bregman and error telemetry.
    pub fn run(&mut self, obs: &Observations, truth: Option<&NodalField>) -> Result<RunOutcome, AlgoError> {
        let state = self.initial_state()?;
        self.run_from(state, obs, truth)
    }

    pub fn run_from(
        &mut self,
        mut state: IterState,
        obs: &Observations,
        truth: Option<&NodalField>,
    ) -> Result<RunOutcome, AlgoError> {
        let mesh = self.model.mesh();
        let mut substeps = Vec::new();
        let mut sweeps = Vec::new();
        let mut lambda_sum = 0.0;
        let mut best: Option<(f64, IterState)> = None;

        for _ in 0..self.cfg.max_sweeps {
            let n = state.sweep;
            let bregman = truth.map(|t| self.penalty.bregman_distance(t, &state.sigma, &state.xi_curr));
            let (next, records, lambda_mass) = self.sweep(&state, obs)?;
            lambda_sum += lambda_mass;
            let residual_sq_sum = records.iter().map(|r| r.residual * r.residual).sum();
            sweeps.push(SweepRecord {
                sweep: n,
                residual_sq_sum,
                bregman,
                e_l1: truth.map(|t| rel_err_l1(mesh, &state.sigma, t)),
                psnr: truth.map(|t| psnr(mesh, &state.sigma, t)),
                lambda_sum,
            });
            let stop = records.iter().all(|r| r.mu == 0.0);
            substeps.extend(records);
            debug!("sweep {n}: R = {residual_sq_sum:.6e}");
            if stop {
                info!("discrepancy principle met after {n} sweeps");
                let final_bregman = truth.map(|t| self.penalty.bregman_distance(t, &state.sigma, &state.xi_curr));
                return Ok(RunOutcome {
                    sigma: state.sigma.clone(),
                    n_delta: n,
                    converged: true,
                    substeps,
                    sweeps,
                    final_bregman,
                    final_state: state,
                });
            }
            if best.as_ref().is_none_or(|(r, _)| residual_sq_sum < *r) {
                best = Some((residual_sq_sum, state.clone()));
            }
            state = next;
        }

        warn!("no convergence within {} sweeps", self.cfg.max_sweeps);
        let (_, best_state) = best.expect("at least one sweep");
        let final_bregman = truth.map(|t| self.penalty.bregman_distance(t, &best_state.sigma, &best_state.xi_curr));
        Ok(RunOutcome {
            sigma: best_state.sigma.clone(),
            n_delta: self.cfg.max_sweeps,
            converged: false,
            substeps,
            sweeps,
            final_bregman,
            final_state: state,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn step_size_cases() {
        let cfg = AlgoConfig { q: 4.0, mu0: 1.8 * (1.0 - 1.0 / 1.05), mu1: 1.0, ..AlgoConfig::default() };
        assert_abs_diff_eq!(cfg.mu0, 0.0857142857, epsilon = 1e-10);
        assert_abs_diff_eq!(step_size(2.0, 1.0, 1.0, &cfg), 0.342857143, epsilon = 1e-9);
        assert_eq!(step_size(1.0, 1.0, 1.0, &cfg), 0.0);
        assert_eq!(step_size(0.0, 1.0, 0.0, &cfg), 0.0);
        // vanishing gradient: the cap μ̄₁ applies
        assert_abs_diff_eq!(step_size(2.0, 0.0, 0.1, &cfg), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn combination_param_cases() {
        let cfg = AlgoConfig::default();
        assert_eq!(combination_param(0, 1.0, 1.0, 0.5, &cfg), 0.0);
        // 4 c0 M τ² δ² / diff² = 2 with c0 = 0.5, M = 1, τδ = 1, diff = 1: the Nesterov term 3/6 binds
        let cfg2 = AlgoConfig { tau: 1.25, ..cfg.clone() };
        assert_abs_diff_eq!(combination_param(3, 1.0, 0.8, 0.5, &cfg2), 0.5, epsilon = 1e-15);
        // with M = 0.375 the ratio is 0.75 and the square-root branch gives 0.5
        let cfg3 = AlgoConfig { m: 0.375, ..cfg2.clone() };
        assert_abs_diff_eq!(combination_param(1000, 1.0, 0.8, 0.5, &cfg3), 0.5, epsilon = 1e-15);
        let c = AlgoConfig { alpha: 3.0, ..cfg.clone() };
        assert_abs_diff_eq!(combination_param(6, 0.0, 0.1, 0.5, &c), 6.0 / 9.0, epsilon = 1e-15);
        let lw = AlgoConfig { mode: Mode::Landweber, ..cfg };
        assert_eq!(combination_param(6, 0.0, 0.1, 0.5, &lw), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(AlgoConfig::default().validate().is_ok());
        assert!(AlgoConfig { tau: 1.0, ..AlgoConfig::default() }.validate().is_err());
        assert!(AlgoConfig { alpha: 2.0, ..AlgoConfig::default() }.validate().is_err());
        assert!(AlgoConfig { q: 2.0, ..AlgoConfig::default() }.validate().is_err());
        let c1 = AlgoConfig::default().c1(0.5);
        assert_abs_diff_eq!(c1, 1.0 - 1.0 / 1.05 - AlgoConfig::default().mu0 / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn implied_m_needs_nu_and_bound() {
        let cfg = AlgoConfig::default();
        assert_eq!(cfg.implied_m(0.5, Some(2.0)), None);
        let cfg = AlgoConfig { nu: Some(2.0), eta: Some(0.0), ..cfg };
        assert_eq!(cfg.implied_m(0.5, None), None);
        let c1 = cfg.c1(0.5);
        let m = cfg.implied_m(0.5, Some(2.0)).unwrap();
        assert!((m - c1 / 2.0 * (cfg.mu0 / 4.0).min(1.0)).abs() < 1e-15);
        let with_bound = AlgoConfig { c_h: Some(2.0), ..cfg };
        assert_eq!(with_bound.implied_m(0.5, None), Some(m));
    }
}
