//! Uniformly convex penalties `Θ(σ) = ‖σ‖²/(2β) + R(σ)` on nodal fields and
//! the conjugate-gradient map `σ = ∇Θ*(ξ) = argmin_z {Θ(z) - ⟨ξ, z⟩}`.
//!
//! All norms are the discrete `X` norms: lumped node masses for `L²` and `L¹`,
//! and `TV_h(z) = Σ_T |T| |∇z|_T` for the total variation.

use serde::{Deserialize, Serialize};

use crate::error::PenaltyError;
use crate::fem::{element_gradients, NodalField};
use crate::mesh::TriMesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    L1,
    Tv,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Primal-dual gap, relative to `½‖g‖²_X`, at which the TV prox stops.
    #[serde(default = "default_tv_tol")]
    pub tv_tol: f64,
    #[serde(default = "default_tv_max_iter")]
    pub tv_max_iter: usize,
}

fn default_beta() -> f64 {
    1.0
}

fn default_tv_tol() -> f64 {
    1e-6
}

fn default_tv_max_iter() -> usize {
    50_000
}

impl PenaltySpec {
    pub fn new(kind: PenaltyKind, beta: f64) -> Self {
        Self { kind, beta, tv_tol: default_tv_tol(), tv_max_iter: default_tv_max_iter() }
    }

    pub fn validate(&self) -> Result<(), PenaltyError> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(PenaltyError::Parameter(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.tv_tol > 0.0) {
            return Err(PenaltyError::Parameter(format!("tv_tol must be positive, got {}", self.tv_tol)));
        }
        if self.tv_max_iter == 0 {
            return Err(PenaltyError::Parameter("tv_max_iter must be positive".into()));
        }
        Ok(())
    }

    /// Modulus of uniform convexity `c₀ = 1/(2β)`.
    pub fn c0(&self) -> f64 {
        1.0 / (2.0 * self.beta)
    }
}

/// Discrete total variation `Σ_T |T| |∇z|_T`.
pub fn total_variation(mesh: &TriMesh, z: &NodalField) -> f64 {
    element_gradients(mesh, &z.values).iter().zip(mesh.elem_area()).map(|(g, a)| a * g[0].hypot(g[1])).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvStats {
    pub iterations: usize,
    pub rel_gap: f64,
}

/// ROF solver on a P1 mesh:
/// `min_z ½‖z - g‖²_X + β TV_h(z)`.
///
/// Works on the dual `p_T ∈ R²`, `|p_T| ≤ 1`, with `z = g - β M⁻¹ Σ_T |T| G_Tᵀ p_T`,
/// by accelerated projected gradient in the area-weighted metric. Stops on the
/// primal-dual gap divided by `½‖g‖²_X`, the objective at `z = 0`.
#[derive(Debug, Clone)]
pub struct TvDenoiser<'m> {
    mesh: &'m TriMesh,
    /// Upper estimate of the largest eigenvalue of `W⁻¹ A M⁻¹ Aᵀ`.
    lipschitz: f64,
}

impl<'m> TvDenoiser<'m> {
    pub fn new(mesh: &'m TriMesh) -> Self {
        let lipschitz = Self::estimate_lipschitz(mesh);
        Self { mesh, lipschitz }
    }

    fn estimate_lipschitz(mesh: &TriMesh) -> f64 {
        // power iteration on p ↦ W⁻¹ A M⁻¹ Aᵀ p (self-adjoint in the W inner product)
        let t = mesh.triangle_count();
        let mut p: Vec<[f64; 2]> = (0..t).map(|k| [1.0 + (k % 7) as f64 * 0.1, 0.5 - (k % 3) as f64 * 0.2]).collect();
        let mut lambda = 0.0;
        for _ in 0..200 {
            let w = dual_to_nodal(mesh, &p);
            let grads = element_gradients(mesh, &w);
            let wnorm = |v: &[[f64; 2]]| -> f64 {
                v.iter().zip(mesh.elem_area()).map(|(x, a)| a * (x[0] * x[0] + x[1] * x[1])).sum::<f64>().sqrt()
            };
            let (np, ng) = (wnorm(&p), wnorm(&grads));
            if ng == 0.0 {
                break;
            }
            lambda = ng / np;
            p = grads.iter().map(|g| [g[0] / ng, g[1] / ng]).collect();
        }
        1.1 * lambda
    }

    pub fn solve(
        &self,
        g: &NodalField,
        beta: f64,
        tol: f64,
        max_iter: usize,
    ) -> Result<(NodalField, TvStats), PenaltyError> {
        let mut dual = vec![[0.0; 2]; self.mesh.triangle_count()];
        self.solve_warm(g, beta, tol, max_iter, &mut dual)
    }

    /// Like [`solve`](Self::solve) but starts from and updates `dual`.
    pub fn solve_warm(
        &self,
        g: &NodalField,
        beta: f64,
        tol: f64,
        max_iter: usize,
        dual: &mut Vec<[f64; 2]>,
    ) -> Result<(NodalField, TvStats), PenaltyError> {
        let mesh = self.mesh;
        g.check(mesh)?;
        if !(beta > 0.0) {
            return Err(PenaltyError::Parameter(format!("beta must be positive, got {beta}")));
        }
        if !(tol > 0.0) {
            return Err(PenaltyError::Parameter(format!("tolerance must be positive, got {tol}")));
        }
        if dual.len() != mesh.triangle_count() {
            *dual = vec![[0.0; 2]; mesh.triangle_count()];
        }

        let step = 1.0 / (beta * beta * self.lipschitz);
        let primal = |p: &[[f64; 2]]| -> Vec<f64> {
            let w = dual_to_nodal(mesh, p);
            g.values.iter().zip(&w).map(|(gv, wv)| gv - beta * wv).collect()
        };
        // objective value at z = 0
        let scale: f64 = 0.5 * g.values.iter().zip(mesh.node_mass()).map(|(v, m)| m * v * v).sum::<f64>();
        // With w = g - z(p) = β Gᵀp the gap P(z) - D(p) reduces to
        // β Σ_T |T| (|∇z| - p·∇z), a sum of non-negative terms free of cancellation.
        let gap_of = |p: &[[f64; 2]], z: &[f64]| -> f64 {
            let grads = element_gradients(mesh, z);
            let gap: f64 = grads
                .iter()
                .zip(p)
                .zip(mesh.elem_area())
                .map(|((d, q), a)| a * (d[0].hypot(d[1]) - q[0] * d[0] - q[1] * d[1]))
                .sum();
            let gap = (beta * gap).max(0.0);
            if gap == 0.0 {
                0.0
            } else {
                gap / scale.max(f64::MIN_POSITIVE)
            }
        };

        let mut z = primal(dual);
        let mut rel_gap = gap_of(dual, &z);
        if rel_gap <= tol {
            return Ok((NodalField { values: z, mesh_id: mesh.id() }, TvStats { iterations: 0, rel_gap }));
        }

        let mut y = dual.clone();
        let mut t_k = 1.0f64;
        let mut zy = z.clone();
        for it in 1..=max_iter {
            // p⁺ = Proj(y + s β ∇z(y))
            let grads = element_gradients(mesh, &zy);
            let next: Vec<[f64; 2]> = y
                .iter()
                .zip(&grads)
                .map(|(q, d)| project_unit([q[0] + step * beta * d[0], q[1] + step * beta * d[1]]))
                .collect();
            // gradient restart: drop momentum when the step opposes it
            let opposing: f64 = y
                .iter()
                .zip(&next)
                .zip(dual.iter())
                .map(|((a, b), c)| (a[0] - b[0]) * (b[0] - c[0]) + (a[1] - b[1]) * (b[1] - c[1]))
                .sum();
            if opposing > 0.0 {
                t_k = 1.0;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
            let mom = (t_k - 1.0) / t_next;
            y = next
                .iter()
                .zip(dual.iter())
                .map(|(a, b)| [a[0] + mom * (a[0] - b[0]), a[1] + mom * (a[1] - b[1])])
                .collect();
            *dual = next;
            t_k = t_next;
            zy = primal(&y);

            if it % 10 == 0 || it == max_iter {
                z = primal(dual);
                rel_gap = gap_of(dual, &z);
                if rel_gap <= tol {
                    return Ok((NodalField { values: z, mesh_id: mesh.id() }, TvStats { iterations: it, rel_gap }));
                }
            }
        }
        Err(PenaltyError::TvNoConvergence { iterations: max_iter, gap: rel_gap })
    }
}

fn project_unit(v: [f64; 2]) -> [f64; 2] {
    let n = v[0].hypot(v[1]);
    if n > 1.0 {
        [v[0] / n, v[1] / n]
    } else {
        v
    }
}

/// `M⁻¹ Σ_T |T| G_Tᵀ p_T`.
fn dual_to_nodal(mesh: &TriMesh, p: &[[f64; 2]]) -> Vec<f64> {
    let mut acc = vec![0.0; mesh.node_count()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let g = &mesh.elem_grad()[t];
        let a = mesh.elem_area()[t];
        for k in 0..3 {
            acc[tri[k]] += a * (g[k][0] * p[t][0] + g[k][1] * p[t][1]);
        }
    }
    acc.iter().zip(mesh.node_mass()).map(|(v, m)| v / m).collect()
}

/// ROF denoising `argmin_z ½‖z - g‖²_X + β TV_h(z)` to relative gap `tol`.
pub fn tv_denoise(mesh: &TriMesh, g: &NodalField, beta: f64, tol: f64) -> Result<NodalField, PenaltyError> {
    TvDenoiser::new(mesh).solve(g, beta, tol, default_tv_max_iter()).map(|(z, _)| z)
}

/// A penalty bound to a mesh.
#[derive(Debug, Clone)]
pub struct Penalty<'m> {
    spec: PenaltySpec,
    mesh: &'m TriMesh,
    tv: Option<TvDenoiser<'m>>,
}

/// Warm-start storage for repeated TV proxes.
#[derive(Debug, Clone, Default)]
pub struct ProxWorkspace {
    dual: Vec<[f64; 2]>,
}

impl<'m> Penalty<'m> {
    pub fn new(mesh: &'m TriMesh, spec: PenaltySpec) -> Result<Self, PenaltyError> {
        spec.validate()?;
        let tv = (spec.kind == PenaltyKind::Tv).then(|| TvDenoiser::new(mesh));
        Ok(Self { spec, mesh, tv })
    }

    pub fn spec(&self) -> &PenaltySpec {
        &self.spec
    }

    pub fn mesh(&self) -> &'m TriMesh {
        self.mesh
    }

    pub fn prox(&self, xi: &NodalField) -> Result<NodalField, PenaltyError> {
        self.prox_with(xi, &mut ProxWorkspace::default())
    }

    /// `∇Θ*(ξ)`, reusing the TV dual stored in `ws`.
    pub fn prox_with(&self, xi: &NodalField, ws: &mut ProxWorkspace) -> Result<NodalField, PenaltyError> {
        xi.check(self.mesh)?;
        let beta = self.spec.beta;
        match self.spec.kind {
            PenaltyKind::Quadratic => Ok(xi.scale(beta)),
            PenaltyKind::L1 => Ok(xi.map(|v| beta * v.signum() * (v.abs() - 1.0).max(0.0))),
            PenaltyKind::Tv => {
                let g = xi.scale(beta);
                let tv = self.tv.as_ref().expect("TV denoiser built for TV penalty");
                tv.solve_warm(&g, beta, self.spec.tv_tol, self.spec.tv_max_iter, &mut ws.dual).map(|(z, _)| z)
            }
        }
    }

    pub fn value(&self, sigma: &NodalField) -> f64 {
        let m = self.mesh.node_mass();
        let l2: f64 = sigma.values.iter().zip(m).map(|(v, w)| w * v * v).sum();
        let quad = l2 / (2.0 * self.spec.beta);
        match self.spec.kind {
            PenaltyKind::Quadratic => quad,
            PenaltyKind::L1 => quad + sigma.values.iter().zip(m).map(|(v, w)| w * v.abs()).sum::<f64>(),
            PenaltyKind::Tv => quad + total_variation(self.mesh, sigma),
        }
    }

    /// `D_ξΘ(σ̄, σ) = Θ(σ̄) - Θ(σ) - ⟨ξ, σ̄ - σ⟩`, for `ξ ∈ ∂Θ(σ)`.
    pub fn bregman_distance(&self, sigma_bar: &NodalField, sigma: &NodalField, xi: &NodalField) -> f64 {
        let pairing: f64 = self
            .mesh
            .node_mass()
            .iter()
            .zip(&xi.values)
            .zip(sigma_bar.values.iter().zip(&sigma.values))
            .map(|((m, x), (a, b))| m * x * (a - b))
            .sum();
        self.value(sigma_bar) - self.value(sigma) - pairing
    }
}

pub fn prox_theta(mesh: &TriMesh, xi: &NodalField, spec: &PenaltySpec) -> Result<NodalField, PenaltyError> {
    Penalty::new(mesh, *spec)?.prox(xi)
}

pub fn theta_value(mesh: &TriMesh, sigma: &NodalField, spec: &PenaltySpec) -> Result<f64, PenaltyError> {
    Ok(Penalty::new(mesh, *spec)?.value(sigma))
}

pub fn bregman_distance(
    mesh: &TriMesh,
    sigma_bar: &NodalField,
    sigma: &NodalField,
    xi: &NodalField,
    spec: &PenaltySpec,
) -> Result<f64, PenaltyError> {
    Ok(Penalty::new(mesh, *spec)?.bregman_distance(sigma_bar, sigma, xi))
}
