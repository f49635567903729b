//! Power-density forward maps `H_i(σ) = σ|∇u_i(σ)|²`, their derivatives and
//! discrete adjoints, and the norms linking the parameter space `X = L²` with
//! the data space `Y = L^{q/2}`.
//!
//! Conductivities and directions are nodal; power densities, residuals and
//! their duals are elementwise. `X` uses the lumped node mass, `Y` the
//! triangle areas. The adjoint returned by [`adjoint_apply`] is the exact
//! transpose of [`derivative_apply`] with respect to these two pairings.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FemError, OperatorError};
use crate::fem::{self, boundary_load, ElementField, NeumannSolver, NodalField, SolverOptions};
use crate::mesh::{polar_angle, TriMesh};

/// A closed-form boundary current.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Current {
    /// `f(x) = a1 x1 + a2 x2`.
    Linear { a1: f64, a2: f64 },
    /// `f = sin(2 k π θ / α)` for `θ ∈ [0, α]` and zero on the rest of the circle.
    Sinusoid { k: u32, alpha: f64 },
}

impl Current {
    pub fn eval(&self, p: [f64; 2]) -> f64 {
        match *self {
            Current::Linear { a1, a2 } => a1 * p[0] + a2 * p[1],
            Current::Sinusoid { k, alpha } => {
                let theta = polar_angle(p);
                if theta <= alpha {
                    (2.0 * f64::from(k) * std::f64::consts::PI * theta / alpha).sin()
                } else {
                    0.0
                }
            }
        }
    }

    pub fn load(&self, mesh: &TriMesh) -> Result<Vec<f64>, FemError> {
        boundary_load(mesh, |p| self.eval(p))
    }
}

/// The injected boundary currents, applied in this order by the Kaczmarz sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentSet {
    pub currents: Vec<Current>,
}

impl CurrentSet {
    pub fn new(currents: Vec<Current>) -> Result<Self, OperatorError> {
        if currents.is_empty() {
            return Err(OperatorError::CurrentIndex { index: 0, count: 0 });
        }
        Ok(Self { currents })
    }

    pub fn len(&self) -> usize {
        self.currents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.currents.is_empty()
    }
}

#[derive(Debug, Clone)]
struct CurrentState {
    u: NodalField,
    grad: Vec<[f64; 2]>,
    grad_sq: Vec<f64>,
}

/// Forward solutions for one conductivity, shared by the derivative and
/// adjoint of every current.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    sigma_bar: Vec<f64>,
    solver: NeumannSolver,
    states: Vec<Option<CurrentState>>,
}

impl ForwardCache {
    /// Potential `u_i(σ)` if current `i` was solved.
    pub fn potential(&self, i: usize) -> Option<&NodalField> {
        self.states.get(i).and_then(|s| s.as_ref()).map(|s| &s.u)
    }

    /// Triangle averages of the clamped conductivity used for the solves.
    pub fn sigma_bar(&self) -> &[f64] {
        &self.sigma_bar
    }

    fn state(&self, i: usize) -> Result<&CurrentState, OperatorError> {
        match self.states.get(i) {
            None => Err(OperatorError::CurrentIndex { index: i, count: self.states.len() }),
            Some(None) => Err(OperatorError::NotCached(i)),
            Some(Some(s)) => Ok(s),
        }
    }

    fn ensure_fresh(&self, mesh: &TriMesh, sigma: &NodalField) -> Result<(), OperatorError> {
        sigma.check(mesh)?;
        if stamp(mesh, sigma) != self.stamp {
            return Err(OperatorError::StaleCache);
        }
        Ok(())
    }
}

fn stamp(mesh: &TriMesh, sigma: &NodalField) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ mesh.id();
    for v in &sigma.values {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x0000_0100_0000_01b3).rotate_left(7);
    }
    h
}

/// Precomputed boundary loads for a mesh and current set.
#[derive(Debug, Clone)]
pub struct ForwardModel<'m> {
    mesh: &'m TriMesh,
    currents: CurrentSet,
    loads: Vec<Vec<f64>>,
    options: SolverOptions,
}

impl<'m> ForwardModel<'m> {
    pub fn new(mesh: &'m TriMesh, currents: &CurrentSet, options: SolverOptions) -> Result<Self, OperatorError> {
        let loads = currents.currents.iter().map(|c| c.load(mesh)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { mesh, currents: currents.clone(), loads, options })
    }

    pub fn mesh(&self) -> &'m TriMesh {
        self.mesh
    }

    pub fn currents(&self) -> &CurrentSet {
        &self.currents
    }

    pub fn current_count(&self) -> usize {
        self.loads.len()
    }

    pub fn options(&self) -> SolverOptions {
        self.options
    }

    /// Solves for the currents in `which` and returns their power densities
    /// (in the same order) with a cache valid for `sigma`.
    pub fn forward_subset(
        &self,
        sigma: &NodalField,
        which: &[usize],
    ) -> Result<(Vec<ElementField>, ForwardCache), OperatorError> {
        sigma.check(self.mesh)?;
        if let Some(&i) = which.iter().find(|&&i| i >= self.loads.len()) {
            return Err(OperatorError::CurrentIndex { index: i, count: self.loads.len() });
        }
        let mesh = self.mesh;
        let clamped = fem::clamp_conductivity(sigma, self.options.sigma_min, self.options.sigma_max);
        let solver = NeumannSolver::new(mesh, &clamped, self.options)?;
        let sigma_bar = fem::element_average(mesh, &clamped);

        let solved: Vec<CurrentState> = which
            .par_iter()
            .map(|&i| {
                let u = solver.solve(&self.loads[i])?;
                let grad = fem::element_gradients(mesh, &u);
                let grad_sq = grad.iter().map(|g| g[0] * g[0] + g[1] * g[1]).collect();
                Ok(CurrentState { u: NodalField { values: u, mesh_id: mesh.id() }, grad, grad_sq })
            })
            .collect::<Result<_, FemError>>()?;

        let mut states = vec![None; self.loads.len()];
        let mut fields = Vec::with_capacity(which.len());
        for (&i, s) in which.iter().zip(solved) {
            let h = sigma_bar.iter().zip(&s.grad_sq).map(|(sb, g2)| sb * g2).collect();
            fields.push(ElementField { values: h, mesh_id: mesh.id() });
            states[i] = Some(s);
        }
        Ok((fields, ForwardCache { stamp: stamp(mesh, sigma), sigma_bar, solver, states }))
    }

    pub fn forward(&self, sigma: &NodalField) -> Result<(Vec<ElementField>, ForwardCache), OperatorError> {
        let all: Vec<usize> = (0..self.loads.len()).collect();
        self.forward_subset(sigma, &all)
    }

    /// `H_i'(σ)[κ] = κ̄|∇u_i|² + 2σ̄ ∇u_i·∇u_i'`, with `u_i'` from the sensitivity problem
    /// `(σ∇u', ∇φ) = -(κ∇u, ∇φ)`.
    pub fn derivative_apply(
        &self,
        sigma: &NodalField,
        cache: &ForwardCache,
        i: usize,
        kappa: &NodalField,
    ) -> Result<ElementField, OperatorError> {
        let mesh = self.mesh;
        cache.ensure_fresh(mesh, sigma)?;
        kappa.check(mesh)?;
        let state = cache.state(i)?;
        let kappa_bar = fem::element_average(mesh, kappa);

        let mut rhs = vec![0.0; mesh.node_count()];
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let w = kappa_bar[t] * mesh.elem_area()[t];
            if w == 0.0 {
                continue;
            }
            let g = &mesh.elem_grad()[t];
            let du = state.grad[t];
            for a in 0..3 {
                rhs[tri[a]] -= w * (g[a][0] * du[0] + g[a][1] * du[1]);
            }
        }
        let du_prime = fem::element_gradients(mesh, &cache.solver.solve(&rhs)?);

        let values = (0..mesh.triangle_count())
            .map(|t| {
                let du = state.grad[t];
                kappa_bar[t] * state.grad_sq[t]
                    + 2.0 * cache.sigma_bar[t] * (du[0] * du_prime[t][0] + du[1] * du_prime[t][1])
            })
            .collect();
        Ok(ElementField { values, mesh_id: mesh.id() })
    }

    /// `H_i'(σ)*ω`: the elementwise density `|∇u_i|²ω + 2∇u_i·∇v` with
    /// `(σ∇v, ∇φ) = -(σω∇u_i, ∇φ)`, mapped to its nodal representative in `X`.
    pub fn adjoint_apply(
        &self,
        sigma: &NodalField,
        cache: &ForwardCache,
        i: usize,
        omega: &ElementField,
    ) -> Result<NodalField, OperatorError> {
        let mesh = self.mesh;
        cache.ensure_fresh(mesh, sigma)?;
        omega.check(mesh)?;
        let state = cache.state(i)?;

        let mut rhs = vec![0.0; mesh.node_count()];
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let w = cache.sigma_bar[t] * omega.values[t] * mesh.elem_area()[t];
            if w == 0.0 {
                continue;
            }
            let g = &mesh.elem_grad()[t];
            let du = state.grad[t];
            for a in 0..3 {
                rhs[tri[a]] -= w * (g[a][0] * du[0] + g[a][1] * du[1]);
            }
        }
        let dv = fem::element_gradients(mesh, &cache.solver.solve(&rhs)?);

        let mut acc = vec![0.0; mesh.node_count()];
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let du = state.grad[t];
            let density = state.grad_sq[t] * omega.values[t] + 2.0 * (du[0] * dv[t][0] + du[1] * dv[t][1]);
            let share = mesh.elem_area()[t] * density / 3.0;
            for &n in tri {
                acc[n] += share;
            }
        }
        let values = acc.iter().zip(mesh.node_mass()).map(|(a, m)| a / m).collect();
        Ok(NodalField { values, mesh_id: mesh.id() })
    }
}

impl ForwardModel<'_> {
    /// Estimates `max_i ‖H_i'(σ)‖` as an operator from `X` to area-weighted `L²`,
    /// by power iteration on `H_i'* H_i'`.
    pub fn derivative_norm_estimate(&self, sigma: &NodalField, iterations: usize) -> Result<f64, OperatorError> {
        let mesh = self.mesh;
        let (_, cache) = self.forward(sigma)?;
        let mut best: f64 = 0.0;
        for i in 0..self.current_count() {
            let mut v = NodalField::from_fn(mesh, |n| 1.0 + 0.5 * (n as f64).sin());
            let mut estimate = 0.0;
            for _ in 0..iterations.max(1) {
                let nv = norm_x(mesh, &v)?;
                if nv == 0.0 {
                    break;
                }
                v = v.scale(1.0 / nv);
                let w = self.derivative_apply(sigma, &cache, i, &v)?;
                v = self.adjoint_apply(sigma, &cache, i, &w)?;
                estimate = inner_x(mesh, &v, &v)?.sqrt().sqrt();
            }
            best = best.max(estimate);
        }
        Ok(best)
    }
}

/// Power density `σ̄_T |∇u|²_T` of a potential.
pub fn power_density(mesh: &TriMesh, sigma: &NodalField, u: &NodalField) -> Result<ElementField, OperatorError> {
    sigma.check(mesh)?;
    u.check(mesh)?;
    let sigma_bar = fem::element_average(mesh, sigma);
    let values = fem::element_gradients(mesh, &u.values)
        .iter()
        .zip(&sigma_bar)
        .map(|(g, s)| s * (g[0] * g[0] + g[1] * g[1]))
        .collect();
    Ok(ElementField { values, mesh_id: mesh.id() })
}

/// Solves all currents and returns the power densities with their cache.
pub fn forward(
    mesh: &TriMesh,
    sigma: &NodalField,
    currents: &CurrentSet,
) -> Result<(Vec<ElementField>, ForwardCache), OperatorError> {
    ForwardModel::new(mesh, currents, SolverOptions::default())?.forward(sigma)
}

pub fn derivative_apply(
    mesh: &TriMesh,
    sigma: &NodalField,
    currents: &CurrentSet,
    cache: &ForwardCache,
    i: usize,
    kappa: &NodalField,
) -> Result<ElementField, OperatorError> {
    ForwardModel::new(mesh, currents, SolverOptions::default())?.derivative_apply(sigma, cache, i, kappa)
}

pub fn adjoint_apply(
    mesh: &TriMesh,
    sigma: &NodalField,
    currents: &CurrentSet,
    cache: &ForwardCache,
    i: usize,
    omega: &ElementField,
) -> Result<NodalField, OperatorError> {
    ForwardModel::new(mesh, currents, SolverOptions::default())?.adjoint_apply(sigma, cache, i, omega)
}

/// Duality mapping of `L^{q/2}` with gauge `t^{q/2-1}`: `|φ|^{q/2-1} sign(φ)`.
pub fn duality_map(phi: &ElementField, q: f64) -> Result<ElementField, OperatorError> {
    if !(q > 2.0) {
        return Err(OperatorError::Exponent(q));
    }
    let e = q / 2.0 - 1.0;
    Ok(phi.map(|v| if v == 0.0 { 0.0 } else { v.signum() * v.abs().powf(e) }))
}

/// `(Σ_T |T| |φ_T|^{q/2})^{2/q}`.
pub fn norm_y(mesh: &TriMesh, phi: &ElementField, q: f64) -> Result<f64, OperatorError> {
    phi.check(mesh)?;
    let p = q / 2.0;
    let s: f64 = mesh.elem_area().iter().zip(&phi.values).map(|(a, v)| a * v.abs().powf(p)).sum();
    Ok(s.powf(1.0 / p))
}

/// `Σ_T |T| φ_T ψ_T`.
pub fn pairing_y(mesh: &TriMesh, phi: &ElementField, psi: &ElementField) -> Result<f64, OperatorError> {
    phi.check(mesh)?;
    psi.check(mesh)?;
    Ok(mesh.elem_area().iter().zip(&phi.values).zip(&psi.values).map(|((a, x), y)| a * x * y).sum())
}

/// `Σ_n m_n κ_n λ_n` with lumped node masses.
pub fn inner_x(mesh: &TriMesh, kappa: &NodalField, lambda: &NodalField) -> Result<f64, OperatorError> {
    kappa.check(mesh)?;
    lambda.check(mesh)?;
    Ok(mesh.node_mass().iter().zip(&kappa.values).zip(&lambda.values).map(|((m, x), y)| m * x * y).sum())
}

pub fn norm_x(mesh: &TriMesh, kappa: &NodalField) -> Result<f64, OperatorError> {
    Ok(inner_x(mesh, kappa, kappa)?.sqrt())
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::mesh::generate_disk_mesh;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn x1() -> CurrentSet {
        CurrentSet::new(vec![Current::Linear { a1: 1.0, a2: 0.0 }]).unwrap()
    }

    fn four() -> CurrentSet {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        CurrentSet::new(vec![
            Current::Linear { a1: 1.0, a2: 0.0 },
            Current::Linear { a1: 0.0, a2: 1.0 },
            Current::Linear { a1: s, a2: s },
            Current::Linear { a1: s, a2: -s },
        ])
        .unwrap()
    }

    fn bumpy(mesh: &TriMesh) -> NodalField {
        NodalField::from_fn(mesh, |n| {
            let p = mesh.nodes()[n];
            1.2 + 0.4 * (5.0 * p[0]).sin() * (3.0 * p[1]).cos()
        })
    }

    #[test]
    fn unit_conductivity_gives_quarter() {
        let mesh = generate_disk_mesh(0.5, 1.0 / 16.0).unwrap();
        let (h, _) = forward(&mesh, &NodalField::constant(&mesh, 1.0), &x1()).unwrap();
        let dev = h[0].values.iter().map(|v| (v - 0.25).abs()).fold(0.0, f64::max);
        assert!(dev < 0.05, "max deviation {dev}");
    }

    #[test]
    fn constant_conductivity_family() {
        let mesh = generate_disk_mesh(0.5, 1.0 / 16.0).unwrap();
        let mut prev = f64::INFINITY;
        for c in [0.5, 1.0, 2.0, 4.0] {
            let (h, _) = forward(&mesh, &NodalField::constant(&mesh, c), &x1()).unwrap();
            let mean = pairing_y(&mesh, &h[0], &ElementField::constant(&mesh, 1.0)).unwrap() / mesh.total_area();
            assert!((mean - 0.25 / c).abs() < 0.02 / c, "c = {c}: {mean}");
            assert!(mean < prev);
            prev = mean;
        }
    }

    #[test]
    fn power_density_basics() {
        let mesh = generate_disk_mesh(0.5, 0.1).unwrap();
        let sigma = bumpy(&mesh);
        let zero = power_density(&mesh, &sigma, &NodalField::constant(&mesh, 3.0)).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
        let u = NodalField::from_fn(&mesh, |n| mesh.nodes()[n][0].powi(2));
        let h1 = power_density(&mesh, &sigma, &u).unwrap();
        let h2 = power_density(&mesh, &sigma.scale(2.0), &u).unwrap();
        for (a, b) in h1.values.iter().zip(&h2.values) {
            assert_eq!(2.0 * a, *b);
            assert!(*a >= 0.0);
        }
    }

    #[test]
    fn repeated_currents_give_identical_fields() {
        let mesh = generate_disk_mesh(0.5, 0.1).unwrap();
        let c = Current::Linear { a1: 0.3, a2: -0.7 };
        let (h, _) = forward(&mesh, &bumpy(&mesh), &CurrentSet::new(vec![c, c]).unwrap()).unwrap();
        assert_eq!(h[0], h[1]);
    }

    #[test]
    fn zero_direction_and_stale_cache() {
        let mesh = generate_disk_mesh(0.5, 0.1).unwrap();
        let model = ForwardModel::new(&mesh, &x1(), SolverOptions::default()).unwrap();
        let sigma = bumpy(&mesh);
        let (_, cache) = model.forward(&sigma).unwrap();
        let d = model.derivative_apply(&sigma, &cache, 0, &NodalField::zeros(&mesh)).unwrap();
        assert!(d.values.iter().all(|&v| v == 0.0));
        let a = model.adjoint_apply(&sigma, &cache, 0, &ElementField::zeros(&mesh)).unwrap();
        assert!(a.values.iter().all(|&v| v == 0.0));
        let other = sigma.scale(1.01);
        assert!(matches!(
            model.derivative_apply(&other, &cache, 0, &NodalField::zeros(&mesh)),
            Err(OperatorError::StaleCache)
        ));
        assert!(matches!(
            model.adjoint_apply(&other, &cache, 0, &ElementField::zeros(&mesh)),
            Err(OperatorError::StaleCache)
        ));
    }

    #[test]
    fn derivative_matches_constant_family() {
        // H(c) = 1/(4c) for f = x1, so dH/dc at c = 1 is -1/4.
        let mesh = generate_disk_mesh(0.5, 1.0 / 16.0).unwrap();
        let model = ForwardModel::new(&mesh, &x1(), SolverOptions::default()).unwrap();
        let sigma = NodalField::constant(&mesh, 1.0);
        let (_, cache) = model.forward(&sigma).unwrap();
        let d = model.derivative_apply(&sigma, &cache, 0, &NodalField::constant(&mesh, 1.0)).unwrap();
        let mean = pairing_y(&mesh, &d, &ElementField::constant(&mesh, 1.0)).unwrap() / mesh.total_area();
        assert!((mean + 0.25).abs() < 0.02, "{mean}");
    }

    #[test]
    fn adjoint_identity_holds() {
        let mesh = generate_disk_mesh(0.5, 0.09).unwrap();
        let model = ForwardModel::new(&mesh, &four(), SolverOptions::default()).unwrap();
        let sigma = bumpy(&mesh);
        let (_, cache) = model.forward(&sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..8 {
            let i = trial % 4;
            let kappa = NodalField::from_fn(&mesh, |_| rng.random_range(-1.0..1.0));
            let omega = ElementField::from_fn(&mesh, |_| rng.random_range(-1.0..1.0));
            let lhs = pairing_y(&mesh, &model.derivative_apply(&sigma, &cache, i, &kappa).unwrap(), &omega).unwrap();
            let rhs = inner_x(&mesh, &kappa, &model.adjoint_apply(&sigma, &cache, i, &omega).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-8 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn adjoint_matches_dense_transpose() {
        // columns of the Jacobian by unit directions, transposed explicitly
        let mesh = generate_disk_mesh(0.5, 0.3).unwrap();
        assert!(mesh.node_count() <= 50);
        let model = ForwardModel::new(&mesh, &x1(), SolverOptions::default()).unwrap();
        let sigma = NodalField::constant(&mesh, 1.0);
        let (_, cache) = model.forward(&sigma).unwrap();
        let n = mesh.node_count();
        let jac: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let e = NodalField::from_fn(&mesh, |k| if k == j { 1.0 } else { 0.0 });
                model.derivative_apply(&sigma, &cache, 0, &e).unwrap().values
            })
            .collect();
        let omega = ElementField::constant(&mesh, 1.0);
        let adj = model.adjoint_apply(&sigma, &cache, 0, &omega).unwrap();
        for j in 0..n {
            // (Jᵀ A ω)_j / m_j
            let col: f64 = jac[j].iter().zip(mesh.elem_area()).map(|(d, a)| d * a).sum();
            assert_abs_diff_eq!(adj.values[j], col / mesh.node_mass()[j], epsilon = 1e-9);
        }
    }

    #[test]
    fn taylor_remainder_is_second_order() {
        let mesh = generate_disk_mesh(0.5, 0.1).unwrap();
        let model = ForwardModel::new(&mesh, &x1(), SolverOptions::default()).unwrap();
        let sigma = bumpy(&mesh);
        let kappa = NodalField::from_fn(&mesh, |n| 0.3 * (7.0 * mesh.nodes()[n][1]).cos());
        let (h0, cache) = model.forward(&sigma).unwrap();
        let dh = model.derivative_apply(&sigma, &cache, 0, &kappa).unwrap();
        let rem: Vec<f64> = [1e-1, 1e-2, 1e-3]
            .iter()
            .map(|&t| {
                let (ht, _) = model.forward(&sigma.axpy(t, &kappa)).unwrap();
                let r = ht[0].sub(&h0[0]).axpy(-t, &dh);
                norm_y(&mesh, &r, 2.2).unwrap()
            })
            .collect();
        for w in rem.windows(2) {
            let order = (w[0] / w[1]).log10();
            assert!((1.8..=2.2).contains(&order), "order {order}");
        }
    }

    #[test]
    fn duality_map_cases() {
        let mesh = generate_disk_mesh(0.5, 0.2).unwrap();
        let phi = ElementField::from_fn(&mesh, |t| (t as f64 - 20.0) * 0.1);
        // exponent q/2 - 1 = 1 is the identity; q = 6 squares with sign
        let j4 = duality_map(&phi, 4.0).unwrap();
        let j6 = duality_map(&phi, 6.0).unwrap();
        for ((a, b), c) in phi.values.iter().zip(&j4.values).zip(&j6.values) {
            assert_abs_diff_eq!(*b, *a, epsilon = 1e-14);
            assert_abs_diff_eq!(*c, a * a.abs(), epsilon = 1e-14);
        }
        let one = duality_map(&ElementField::constant(&mesh, 1.0), 2.2).unwrap();
        assert!(one.values.iter().all(|&v| v == 1.0));
        let zero = duality_map(&ElementField::zeros(&mesh), 2.2).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
        assert!(duality_map(&phi, 2.0).is_err());
        // ⟨J(φ), φ⟩ = ‖φ‖^{q/2}
        let q = 2.2;
        let lhs = pairing_y(&mesh, &duality_map(&phi, q).unwrap(), &phi).unwrap();
        assert_abs_diff_eq!(lhs, norm_y(&mesh, &phi, q).unwrap().powf(q / 2.0), epsilon = 1e-12);
    }

    #[test]
    fn discrete_norms_of_constants() {
        let mesh = generate_disk_mesh(0.5, 1.0 / 32.0).unwrap();
        let q = 2.2;
        let ny = norm_y(&mesh, &ElementField::constant(&mesh, 1.0), q).unwrap();
        assert_abs_diff_eq!(ny, (PI / 4.0).powf(2.0 / q), epsilon = 2e-3);
        let nx = norm_x(&mesh, &NodalField::constant(&mesh, 1.0)).unwrap();
        assert_abs_diff_eq!(nx * nx, PI / 4.0, epsilon = 2e-3);
    }

    #[test]
    fn mesh_mismatch_is_rejected() {
        let a = generate_disk_mesh(0.5, 0.2).unwrap();
        let b = generate_disk_mesh(0.5, 0.1).unwrap();
        assert!(norm_x(&a, &NodalField::constant(&b, 1.0)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn duality_map_is_odd_and_monotone(a in -50.0f64..50.0, b in -50.0f64..50.0, q in 2.05f64..6.0) {
                let mesh = generate_disk_mesh(0.5, 0.3).unwrap();
                let fa = duality_map(&ElementField::constant(&mesh, a), q).unwrap().values[0];
                let fb = duality_map(&ElementField::constant(&mesh, b), q).unwrap().values[0];
                let fna = duality_map(&ElementField::constant(&mesh, -a), q).unwrap().values[0];
                prop_assert_eq!(fna, -fa);
                prop_assert_eq!(fa.signum() * a.signum() >= 0.0, true);
                if a < b { prop_assert!(fa <= fb); }
            }
        }
    }

    #[test]
    fn derivative_norm_estimate_bounds_random_directions() {
        let mesh = generate_disk_mesh(0.5, 1.0 / 8.0).unwrap();
        let model = ForwardModel::new(&mesh, &four(), SolverOptions::default()).unwrap();
        let sigma = bumpy(&mesh);
        let c_h = model.derivative_norm_estimate(&sigma, 60).unwrap();
        let (_, cache) = model.forward(&sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let kappa = NodalField::from_fn(&mesh, |_| rng.random_range(-1.0..1.0));
            for i in 0..4 {
                let d = model.derivative_apply(&sigma, &cache, i, &kappa).unwrap();
                let ratio = pairing_y(&mesh, &d, &d).unwrap().sqrt() / norm_x(&mesh, &kappa).unwrap();
                assert!(ratio <= c_h * (1.0 + 1e-6), "{ratio} > {c_h}");
            }
        }
    }
}
