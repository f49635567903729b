//! P1 finite elements on a [`TriMesh`]: nodal and elementwise fields, the
//! conductivity-weighted stiffness matrix, boundary loads, and the Neumann
//! solve in the space of potentials with zero boundary mean.

use crate::error::FemError;
use crate::mesh::TriMesh;

/// Safeguard bounds applied to the conductivity before every solve.
pub const SIGMA_MIN: f64 = 0.05;
pub const SIGMA_MAX: f64 = 20.0;

/// Relative tolerance on the compatibility condition `∫_Γ f ds = 0`.
const COMPATIBILITY_TOL: f64 = 1e-3;

/// A P1 field: one value per mesh node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalField {
    pub values: Vec<f64>,
    pub mesh_id: u64,
}

/// A piecewise-constant field: one value per triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementField {
    pub values: Vec<f64>,
    pub mesh_id: u64,
}

macro_rules! field_common {
    ($ty:ident, $count:ident) => {
        impl $ty {
            pub fn new(mesh: &TriMesh, values: Vec<f64>) -> Result<Self, FemError> {
                if values.len() != mesh.$count() {
                    return Err(FemError::Length { expected: mesh.$count(), found: values.len() });
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(FemError::NonFinite(stringify!($ty)));
                }
                Ok(Self { values, mesh_id: mesh.id() })
            }

            pub fn constant(mesh: &TriMesh, value: f64) -> Self {
                Self { values: vec![value; mesh.$count()], mesh_id: mesh.id() }
            }

            pub fn zeros(mesh: &TriMesh) -> Self {
                Self::constant(mesh, 0.0)
            }

            pub fn from_fn(mesh: &TriMesh, f: impl FnMut(usize) -> f64) -> Self {
                Self { values: (0..mesh.$count()).map(f).collect(), mesh_id: mesh.id() }
            }

            pub fn len(&self) -> usize {
                self.values.len()
            }

            pub fn is_empty(&self) -> bool {
                self.values.is_empty()
            }

            pub fn check(&self, mesh: &TriMesh) -> Result<(), FemError> {
                if self.mesh_id != mesh.id() {
                    return Err(FemError::MeshMismatch);
                }
                if self.values.len() != mesh.$count() {
                    return Err(FemError::Length { expected: mesh.$count(), found: self.values.len() });
                }
                Ok(())
            }

            pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
                Self { values: self.values.iter().map(|&v| f(v)).collect(), mesh_id: self.mesh_id }
            }

            /// `self + a * other`
            pub fn axpy(&self, a: f64, other: &Self) -> Self {
                debug_assert_eq!(self.mesh_id, other.mesh_id);
                Self {
                    values: self.values.iter().zip(&other.values).map(|(x, y)| x + a * y).collect(),
                    mesh_id: self.mesh_id,
                }
            }

            pub fn sub(&self, other: &Self) -> Self {
                self.axpy(-1.0, other)
            }

            pub fn scale(&self, a: f64) -> Self {
                self.map(|v| a * v)
            }

            pub fn max_value(&self) -> f64 {
                self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }

            pub fn min_value(&self) -> f64 {
                self.values.iter().copied().fold(f64::INFINITY, f64::min)
            }
        }
    };
}

field_common!(NodalField, node_count);
field_common!(ElementField, triangle_count);

/// Clamps a conductivity into `[lo, hi]`.
pub fn clamp_conductivity(sigma: &NodalField, lo: f64, hi: f64) -> NodalField {
    sigma.map(|v| v.clamp(lo, hi))
}

/// Triangle averages of a nodal field.
pub fn element_average(mesh: &TriMesh, field: &NodalField) -> Vec<f64> {
    mesh.triangles().iter().map(|t| (field.values[t[0]] + field.values[t[1]] + field.values[t[2]]) / 3.0).collect()
}

/// Constant gradient of a P1 field on every triangle.
pub fn element_gradients(mesh: &TriMesh, field: &[f64]) -> Vec<[f64; 2]> {
    mesh.triangles()
        .iter()
        .zip(mesh.elem_grad())
        .map(|(t, g)| {
            // differences against the first vertex make constants exact zeros
            let (d1, d2) = (field[t[1]] - field[t[0]], field[t[2]] - field[t[0]]);
            [d1 * g[1][0] + d2 * g[2][0], d1 * g[1][1] + d2 * g[2][1]]
        })
        .collect()
}

/// Compressed-row symmetric sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        match row.binary_search(&j) {
            Ok(k) => self.values[self.row_ptr[i] + k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
            *yi = self.col_idx[lo..hi].iter().zip(&self.values[lo..hi]).map(|(&j, a)| a * x[j]).sum();
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row[self.col_idx[k]] = self.values[k];
            }
        }
        d
    }
}

/// Sparsity pattern of the P1 stiffness matrix plus, for every triangle, the
/// value slots of its 3x3 local block.
#[derive(Debug)]
pub struct StiffnessPattern {
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    slots: Vec<[usize; 9]>,
}

impl StiffnessPattern {
    pub(crate) fn new(mesh: &TriMesh) -> Self {
        let n = mesh.node_count();
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for t in mesh.triangles() {
            for &a in t {
                cols[a].extend_from_slice(t);
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for c in &mut cols {
            c.sort_unstable();
            c.dedup();
            col_idx.extend_from_slice(c);
            row_ptr.push(col_idx.len());
        }
        let slot = |i: usize, j: usize| {
            let row = &col_idx[row_ptr[i]..row_ptr[i + 1]];
            row_ptr[i] + row.binary_search(&j).expect("pattern contains element couplings")
        };
        let slots = mesh
            .triangles()
            .iter()
            .map(|t| {
                let mut s = [0; 9];
                for a in 0..3 {
                    for b in 0..3 {
                        s[3 * a + b] = slot(t[a], t[b]);
                    }
                }
                s
            })
            .collect();
        Self { row_ptr, col_idx, slots }
    }
}

/// Assembles `Σ_T w_T |T| ∇φ_i·∇φ_j` for elementwise weights `w`.
pub fn assemble_weighted(mesh: &TriMesh, weights: &[f64]) -> CsrMatrix {
    let pattern = mesh.pattern();
    let mut values = vec![0.0; pattern.col_idx.len()];
    for ((g, &area), (slots, &w)) in
        mesh.elem_grad().iter().zip(mesh.elem_area()).zip(pattern.slots.iter().zip(weights))
    {
        let local = local_stiffness(g, area);
        for k in 0..9 {
            values[slots[k]] += w * local[k / 3][k % 3];
        }
    }
    CsrMatrix { n: mesh.node_count(), row_ptr: pattern.row_ptr.clone(), col_idx: pattern.col_idx.clone(), values }
}

/// Unit-conductivity element matrix `|T| ∇φ_a·∇φ_b`.
pub fn local_stiffness(grad: &[[f64; 2]; 3], area: f64) -> [[f64; 3]; 3] {
    let mut k = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            k[a][b] = area * (grad[a][0] * grad[b][0] + grad[a][1] * grad[b][1]);
        }
    }
    k
}

/// Stiffness matrix for a nodal conductivity, averaged per triangle.
pub fn assemble_stiffness(mesh: &TriMesh, sigma: &NodalField) -> Result<CsrMatrix, FemError> {
    sigma.check(mesh)?;
    if let Some((node, &value)) = sigma.values.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        return Err(FemError::NonPositiveConductivity { node, value });
    }
    Ok(assemble_weighted(mesh, &element_average(mesh, sigma)))
}

/// `∫_Γ f φ_i ds` with two-point Gauss quadrature on each boundary edge.
pub fn boundary_load(mesh: &TriMesh, f: impl Fn([f64; 2]) -> f64) -> Result<Vec<f64>, FemError> {
    const G: f64 = 0.211_324_865_405_187_1; // (1 - 1/√3) / 2
    let nodes = mesh.nodes();
    let mut load = vec![0.0; mesh.node_count()];
    let mut scale = 0.0;
    for e in mesh.boundary_edges() {
        let (pa, pb) = (nodes[e.a], nodes[e.b]);
        let len = (pb[0] - pa[0]).hypot(pb[1] - pa[1]);
        for t in [G, 1.0 - G] {
            let p = [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])];
            let v = f(p);
            if !v.is_finite() {
                return Err(FemError::NonFinite("boundary current"));
            }
            load[e.a] += 0.5 * len * v * (1.0 - t);
            load[e.b] += 0.5 * len * v * t;
            scale += 0.5 * len * v.abs();
        }
    }
    let integral: f64 = load.iter().sum();
    if integral.abs() > COMPATIBILITY_TOL * scale.max(f64::MIN_POSITIVE) && integral.abs() > 1e-14 {
        return Err(FemError::Compatibility { integral, scale });
    }
    Ok(load)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Relative residual tolerance of the conjugate-gradient solve.
    pub rel_tol: f64,
    /// Iteration cap; `None` means `10 n + 100`.
    pub max_iter: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { sigma_min: SIGMA_MIN, sigma_max: SIGMA_MAX, rel_tol: 1e-12, max_iter: None }
    }
}

/// The Neumann problem `-∇·(σ∇u) = 0`, `σ ∂u/∂ν = f`, `∫_Γ u ds = 0` for a
/// fixed conductivity.
///
/// The constraint enters as a Lagrange multiplier: the augmented system is
/// `K u + c m = b`, `mᵀu = 0` with `m` the boundary mass vector. Since the
/// constants span the kernel of `K`, the multiplier is `c = Σb / Σm`; the
/// remaining singular but consistent system is solved by Jacobi-preconditioned
/// CG and the kernel component fixed by the constraint row.
#[derive(Debug, Clone)]
pub struct NeumannSolver {
    matrix: CsrMatrix,
    inv_diag: Vec<f64>,
    boundary_mass: Vec<f64>,
    boundary_length: f64,
    options: SolverOptions,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub rel_residual: f64,
    pub multiplier: f64,
}

impl NeumannSolver {
    /// Clamps `sigma` into the safeguard range and assembles the stiffness matrix.
    pub fn new(mesh: &TriMesh, sigma: &NodalField, options: SolverOptions) -> Result<Self, FemError> {
        let clamped = clamp_conductivity(sigma, options.sigma_min, options.sigma_max);
        let matrix = assemble_stiffness(mesh, &clamped)?;
        Ok(Self::from_matrix(mesh, matrix, options))
    }

    pub fn from_matrix(mesh: &TriMesh, matrix: CsrMatrix, options: SolverOptions) -> Self {
        let inv_diag = matrix.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();
        let boundary_mass = mesh.boundary_mass().to_vec();
        let boundary_length = boundary_mass.iter().sum();
        Self { matrix, inv_diag, boundary_mass, boundary_length, options }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn solve(&self, load: &[f64]) -> Result<Vec<f64>, FemError> {
        self.solve_with_stats(load).map(|(u, _)| u)
    }

    pub fn solve_with_stats(&self, load: &[f64]) -> Result<(Vec<f64>, SolveStats), FemError> {
        let n = self.matrix.n;
        assert_eq!(load.len(), n, "load vector length");
        let multiplier = load.iter().sum::<f64>() / self.boundary_length;
        let rhs: Vec<f64> = load.iter().zip(&self.boundary_mass).map(|(b, m)| b - multiplier * m).collect();
        let rhs_norm = dot(&rhs, &rhs).sqrt();
        if rhs_norm == 0.0 {
            return Ok((vec![0.0; n], SolveStats { iterations: 0, rel_residual: 0.0, multiplier }));
        }

        let max_iter = self.options.max_iter.unwrap_or(10 * n + 100);
        let target = self.options.rel_tol * rhs_norm;
        let mut x = vec![0.0; n];
        let mut r = rhs.clone();
        let mut z: Vec<f64> = r.iter().zip(&self.inv_diag).map(|(a, d)| a * d).collect();
        let mut p = z.clone();
        let mut ap = vec![0.0; n];
        let mut rz = dot(&r, &z);
        let mut iterations = 0;
        let mut res_norm = rhs_norm;
        while res_norm > target {
            if iterations >= max_iter {
                return Err(FemError::NoConvergence { iterations, residual: res_norm / rhs_norm });
            }
            self.matrix.mul_vec_into(&p, &mut ap);
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                return Err(FemError::NoConvergence { iterations, residual: res_norm / rhs_norm });
            }
            let alpha = rz / pap;
            for k in 0..n {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            res_norm = dot(&r, &r).sqrt();
            for k in 0..n {
                z[k] = r[k] * self.inv_diag[k];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for k in 0..n {
                p[k] = z[k] + beta * p[k];
            }
            iterations += 1;
        }

        let shift = dot(&self.boundary_mass, &x) / self.boundary_length;
        x.iter_mut().for_each(|v| *v -= shift);
        Ok((x, SolveStats { iterations, rel_residual: res_norm / rhs_norm, multiplier }))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves the Neumann problem for one boundary current.
pub fn solve_neumann(mesh: &TriMesh, sigma: &NodalField, f: impl Fn([f64; 2]) -> f64) -> Result<NodalField, FemError> {
    let load = boundary_load(mesh, f)?;
    let solver = NeumannSolver::new(mesh, sigma, SolverOptions::default())?;
    let u = solver.solve(&load)?;
    Ok(NodalField { values: u, mesh_id: mesh.id() })
}
