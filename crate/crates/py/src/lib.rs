//! Python bindings: meshes, phantoms, the forward map, proximal maps,
//! reconstructions and whole experiments.

use std::path::PathBuf;

use aet_core::experiment::{compute_experiment, run_experiment, ExperimentConfig};
use aet_core::fem::SolverOptions;
use aet_core::mesh::{generate_disk_mesh, load_mesh, save_mesh, TriMesh};
use aet_core::metrics::MetricsReport;
use aet_core::operator::{CurrentSet, ForwardModel};
use aet_core::penalty::{Penalty, PenaltyKind, PenaltySpec};
use aet_core::phantom::{build_phantom, currents_full, currents_limited, PhantomSpec};
use aet_core::tpg::{AlgoConfig, Observations, Solver};
use aet_core::{ElementField, NodalField};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn json_to_py(py: Python<'_>, text: serde_json::Result<String>) -> PyResult<Bound<'_, PyAny>> {
    let text = text.map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Triangulated disk.
#[pyclass(name = "Mesh", module = "aet", frozen)]
struct PyMesh {
    inner: TriMesh,
}

#[pymethods]
impl PyMesh {
    /// Ring mesh of the disk of `radius` with target edge length `h`.
    #[staticmethod]
    #[pyo3(signature = (radius = 0.5, h = 1.0 / 64.0))]
    fn disk(radius: f64, h: f64) -> PyResult<Self> {
        Ok(Self { inner: generate_disk_mesh(radius, h).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_mesh(path).map_err(value_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_mesh(&self.inner, path).map_err(runtime_err)
    }

    #[getter]
    fn radius(&self) -> f64 {
        self.inner.radius()
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn triangle_count(&self) -> usize {
        self.inner.triangle_count()
    }

    #[getter]
    fn nodes(&self) -> Vec<(f64, f64)> {
        self.inner.nodes().iter().map(|p| (p[0], p[1])).collect()
    }

    #[getter]
    fn triangles(&self) -> Vec<(usize, usize, usize)> {
        self.inner.triangles().iter().map(|t| (t[0], t[1], t[2])).collect()
    }

    /// Lumped mass per node.
    #[getter]
    fn node_mass(&self) -> Vec<f64> {
        self.inner.node_mass().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Mesh(radius={}, nodes={}, triangles={})",
            self.inner.radius(),
            self.inner.node_count(),
            self.inner.triangle_count()
        )
    }
}

fn nodal(mesh: &TriMesh, values: Vec<f64>) -> PyResult<NodalField> {
    NodalField::new(mesh, values).map_err(value_err)
}

fn currents(alpha: Option<f64>) -> PyResult<CurrentSet> {
    match alpha {
        None => Ok(currents_full()),
        Some(a) => currents_limited(a, 4).map_err(value_err),
    }
}

fn penalty_spec(kind: &str, beta: f64) -> PyResult<PenaltySpec> {
    let kind = match kind {
        "l1" => PenaltyKind::L1,
        "tv" => PenaltyKind::Tv,
        "quadratic" => PenaltyKind::Quadratic,
        other => return Err(PyValueError::new_err(format!("unknown penalty `{other}`"))),
    };
    let spec = PenaltySpec::new(kind, beta);
    spec.validate().map_err(value_err)?;
    Ok(spec)
}

/// Nodal conductivity of a phantom. `spec` is a TOML phantom description;
/// the built-in geometry phantom is used when it is omitted.
#[pyfunction]
#[pyo3(signature = (mesh, spec = None))]
fn phantom(mesh: &PyMesh, spec: Option<&str>) -> PyResult<Vec<f64>> {
    let spec: PhantomSpec = match spec {
        Some(text) => toml::from_str(text).map_err(value_err)?,
        None => PhantomSpec::default(),
    };
    Ok(build_phantom(&mesh.inner, &spec, None).map_err(value_err)?.values)
}

/// Power densities `σ|∇u_i|²`, one list of triangle values per current.
/// `alpha` selects sinusoidal currents on an arc of that opening instead of
/// the four linear ones.
#[pyfunction]
#[pyo3(signature = (mesh, sigma, alpha = None))]
fn power_densities(mesh: &PyMesh, sigma: Vec<f64>, alpha: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
    let sigma = nodal(&mesh.inner, sigma)?;
    let model = ForwardModel::new(&mesh.inner, &currents(alpha)?, SolverOptions::default()).map_err(value_err)?;
    let (h, _) = model.forward(&sigma).map_err(runtime_err)?;
    Ok(h.into_iter().map(|f| f.values).collect())
}

/// Proximal map of the penalty `kind` ("l1", "tv" or "quadratic") applied to a dual variable.
#[pyfunction]
#[pyo3(signature = (mesh, xi, kind = "l1", beta = 1.0))]
fn prox(mesh: &PyMesh, xi: Vec<f64>, kind: &str, beta: f64) -> PyResult<Vec<f64>> {
    let penalty = Penalty::new(&mesh.inner, penalty_spec(kind, beta)?).map_err(value_err)?;
    Ok(penalty.prox(&nodal(&mesh.inner, xi)?).map_err(runtime_err)?.values)
}

/// Relative L1 and TV errors and PSNR of `rec` against `truth`.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, mesh: &PyMesh, rec: Vec<f64>, truth: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    let report = MetricsReport::compute(&mesh.inner, &nodal(&mesh.inner, rec)?, &nodal(&mesh.inner, truth)?);
    json_to_py(py, serde_json::to_string(&report))
}

/// Reconstructs σ from power-density data on `mesh`. Keyword arguments
/// override the algorithm settings (`mode`, `tau`, `m`, `max_sweeps`, ...).
/// Returns a dict with `sigma`, `n_delta`, `converged` and `residuals`.
#[pyfunction]
#[pyo3(signature = (mesh, data, delta, penalty = "l1", beta = 1.0, alpha = None, truth = None, **algo))]
#[allow(clippy::too_many_arguments)]
fn reconstruct<'py>(
    py: Python<'py>,
    mesh: &PyMesh,
    data: Vec<Vec<f64>>,
    delta: Vec<f64>,
    penalty: &str,
    beta: f64,
    alpha: Option<f64>,
    truth: Option<Vec<f64>>,
    algo: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let m = &mesh.inner;
    let cfg: AlgoConfig = match algo {
        Some(kw) => {
            let text: String = py.import("json")?.call_method1("dumps", (kw,))?.extract()?;
            serde_json::from_str(&text).map_err(value_err)?
        }
        None => AlgoConfig::default(),
    };
    let options = SolverOptions { sigma_min: cfg.sigma_min, sigma_max: cfg.sigma_max, ..SolverOptions::default() };
    let model = ForwardModel::new(m, &currents(alpha)?, options).map_err(value_err)?;
    let penalty = Penalty::new(m, penalty_spec(penalty, beta)?).map_err(value_err)?;
    let data = data.into_iter().map(|d| ElementField::new(m, d)).collect::<Result<Vec<_>, _>>().map_err(value_err)?;
    let truth = truth.map(|t| nodal(m, t)).transpose()?;
    let mut solver = Solver::new(&model, &penalty, cfg).map_err(value_err)?;
    let out = solver.run(&Observations { data, delta }, truth.as_ref()).map_err(runtime_err)?;
    let result = PyDict::new(py);
    result.set_item("sigma", out.sigma.values)?;
    result.set_item("n_delta", out.n_delta)?;
    result.set_item("converged", out.converged)?;
    result.set_item("residuals", out.substeps.iter().map(|r| r.residual).collect::<Vec<_>>())?;
    result.set_item("final_bregman", out.final_bregman)?;
    Ok(result.into_any())
}

fn load_config(config: &str) -> PyResult<ExperimentConfig> {
    let path = std::path::Path::new(config);
    if path.is_file() {
        ExperimentConfig::load(path).map_err(value_err)
    } else {
        ExperimentConfig::from_toml(config).map_err(value_err)
    }
}

/// Runs an experiment from a config path or TOML text and returns the summary
/// as a dict. Output files are written only when `write` is true.
#[pyfunction]
#[pyo3(signature = (config, write = false))]
fn run<'py>(py: Python<'py>, config: &str, write: bool) -> PyResult<Bound<'py, PyAny>> {
    let cfg = load_config(config)?;
    let summary = py
        .detach(|| if write { run_experiment(&cfg) } else { compute_experiment(&cfg).map(|r| r.summary) })
        .map_err(runtime_err)?;
    json_to_py(py, serde_json::to_string(&summary))
}

#[pymodule]
fn aet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMesh>()?;
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(power_densities, m)?)?;
    m.add_function(wrap_pyfunction!(prox, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
