//! Experiment pipeline: mesh generation, phantom, synthetic data on the fine
//! mesh, noise, reconstruction on the coarse mesh for every noise level, and
//! the artifacts describing each run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ExperimentError, IoError};
use crate::fem::{ElementField, NodalField, SolverOptions};
use crate::io::{write_residuals_csv, write_sweeps_csv, write_vtk};
use crate::mesh::{generate_disk_mesh, polar_angle, TriMesh};
use crate::metrics::{rel_err_l1_masked, MetricsReport, Psnr};
use crate::operator::{norm_y, CurrentSet, ForwardModel};
use crate::penalty::{Penalty, PenaltyKind, PenaltySpec};
use crate::phantom::{
    add_noise_all, build_phantom, currents_full, currents_limited, synthesize_data, NoiseSpec, PhantomSpec,
};
use crate::tpg::{AlgoConfig, Mode, Observations, RunOutcome, Solver};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Reconstruction mesh size.
    #[serde(default = "default_h_coarse")]
    pub h_coarse: f64,
    /// Data mesh size; equal to `h_coarse` means the reconstruction mesh is reused.
    #[serde(default = "default_h_fine")]
    pub h_fine: f64,
}

fn default_radius() -> f64 {
    0.5
}

fn default_h_coarse() -> f64 {
    1.0 / 64.0
}

fn default_h_fine() -> f64 {
    1.0 / 128.0
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self { radius: default_radius(), h_coarse: default_h_coarse(), h_fine: default_h_fine() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CurrentFamily {
    /// `x1, x2, (x1 + x2)/√2, (x1 - x2)/√2`.
    #[default]
    Full,
    /// `sin(2iπθ/α)` on `θ ∈ [0, α]`, `i = 1..=count`.
    Limited { alpha: f64, count: usize },
}

impl CurrentFamily {
    pub fn build(&self) -> Result<CurrentSet, ExperimentError> {
        match *self {
            CurrentFamily::Full => Ok(currents_full()),
            CurrentFamily::Limited { alpha, count } => Ok(currents_limited(alpha, count)?),
        }
    }

    /// Opening angle of the observed boundary arc, if limited.
    pub fn observed_angle(&self) -> Option<f64> {
        match *self {
            CurrentFamily::Full => None,
            CurrentFamily::Limited { alpha, .. } => Some(alpha),
        }
    }
}

/// How the per-current noise bound `δ_i` handed to the iteration is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DeltaRule {
    /// `δ_i = δ_e ‖y_i‖`, the injected noise only.
    #[default]
    Noise,
    /// `δ_i = ‖y^δ_i - H_i(σ†)‖` on the reconstruction mesh: injected noise
    /// plus the discretization mismatch between data and reconstruction meshes.
    Total,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Relative paths are resolved against the config file's directory.
    pub output_dir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_noise_levels")]
    pub noise_levels: Vec<f64>,
    #[serde(default)]
    pub delta_rule: DeltaRule,
    #[serde(default)]
    pub mesh: MeshConfig,
    #[serde(default)]
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub currents: CurrentFamily,
    #[serde(default = "default_penalty")]
    pub penalty: PenaltySpec,
    #[serde(default)]
    pub algorithm: AlgoConfig,
}

fn default_seed() -> u64 {
    2024
}

fn default_noise_levels() -> Vec<f64> {
    vec![0.08, 0.04, 0.02, 0.008]
}

fn default_penalty() -> PenaltySpec {
    PenaltySpec::new(PenaltyKind::L1, 1.0)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            ExperimentError::Config(m) => ExperimentError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let PhantomSpec::Image { path: img, .. } = &mut cfg.phantom {
            if Path::new(img.as_str()).is_relative() {
                *img = base.join(img.as_str()).display().to_string();
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        let m = &self.mesh;
        if !(m.radius > 0.0 && m.h_coarse > 0.0 && m.h_coarse < m.radius) {
            return bad(format!(
                "mesh: need 0 < h_coarse < radius, got h_coarse = {}, radius = {}",
                m.h_coarse, m.radius
            ));
        }
        if !(m.h_fine > 0.0 && m.h_fine < m.radius) {
            return bad(format!("mesh: need 0 < h_fine < radius, got {}", m.h_fine));
        }
        if self.noise_levels.is_empty() {
            return bad("noise_levels must not be empty".into());
        }
        if let Some(d) = self.noise_levels.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
            return bad(format!("noise levels must be non-negative, got {d}"));
        }
        let mut sorted = self.noise_levels.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return bad("noise levels must be distinct".into());
        }
        self.phantom.validate(m.radius).map_err(|e| ExperimentError::Config(format!("phantom: {e}")))?;
        self.penalty.validate().map_err(|e| ExperimentError::Config(format!("penalty: {e}")))?;
        self.algorithm.validate().map_err(|e| ExperimentError::Config(format!("algorithm: {e}")))?;
        self.currents.build().map_err(|e| ExperimentError::Config(format!("currents: {e}")))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTimings {
    pub reconstruction_s: f64,
}

/// Outcome of the reconstruction at one noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub noise_level: f64,
    pub directory: String,
    pub mode: Mode,
    pub penalty: PenaltyKind,
    pub n_delta: usize,
    pub converged: bool,
    pub e_l1: f64,
    pub e_tv: f64,
    pub psnr: Psnr,
    /// Relative `L¹` error over nodes facing the observed arc, limited currents only.
    pub e_l1_observed: Option<f64>,
    pub e_l1_occluded: Option<f64>,
    pub final_bregman: Option<f64>,
    pub delta: Vec<f64>,
    /// `‖H_i(σ_rec) - y^δ_i‖` per current.
    pub final_residuals: Vec<f64>,
    pub tau: f64,
    pub sweeps: usize,
    pub timings: RunTimings,
}

impl RunSummary {
    pub fn residuals_within_discrepancy(&self) -> bool {
        self.final_residuals.iter().zip(&self.delta).all(|(r, d)| *r <= self.tau * d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshInfo {
    pub coarse_nodes: usize,
    pub coarse_triangles: usize,
    pub fine_nodes: usize,
    pub fine_triangles: usize,
    /// Coarse centroids resolved by nearest-triangle fallback during data transfer.
    pub transfer_fallbacks: usize,
    /// `‖H_i(σ†) - y_i‖ / ‖y_i‖` on the reconstruction mesh before noise.
    pub relative_mismatch: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTimings {
    pub synthesis_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: ExperimentConfig,
    pub mesh: MeshInfo,
    pub runs: Vec<RunSummary>,
    /// `(c₁/ν) min{μ̄₀/C_H², μ̄₁}`, reported when `ν` is configured; `C_H` is
    /// estimated at the initial conductivity unless given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implied_m: Option<f64>,
    pub timings: ExperimentTimings,
}

impl ExperimentSummary {
    pub fn all_converged(&self) -> bool {
        self.runs.iter().all(|r| r.converged)
    }
}

/// Everything computed by one run, kept in memory until written.
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub outcome: RunOutcome,
    pub measured: Vec<ElementField>,
    pub reconstructed: Vec<ElementField>,
}

pub struct ExperimentResult {
    pub summary: ExperimentSummary,
    pub coarse: TriMesh,
    pub sigma_true: NodalField,
    pub exact: Vec<ElementField>,
    pub runs: Vec<RunArtifacts>,
}

fn level_dir(level: f64) -> String {
    format!("noise_{level}")
}

/// Runs the pipeline without touching the file system.
pub fn compute_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    cfg.validate()?;
    let start = Instant::now();
    let currents = cfg.currents.build()?;
    let coarse = generate_disk_mesh(cfg.mesh.radius, cfg.mesh.h_coarse)?;
    let fine = match cfg.mesh.h_fine {
        h if h == cfg.mesh.h_coarse => None,
        h => Some(generate_disk_mesh(cfg.mesh.radius, h)?),
    };
    let data_mesh = fine.as_ref().unwrap_or(&coarse);
    if fine.is_none() {
        log::warn!("data and reconstruction share one mesh");
    }
    let opts = SolverOptions {
        sigma_min: cfg.algorithm.sigma_min,
        sigma_max: cfg.algorithm.sigma_max,
        ..SolverOptions::default()
    };
    let sigma_true = build_phantom(&coarse, &cfg.phantom, None)?;
    let sigma_data = match &fine {
        Some(f) => build_phantom(f, &cfg.phantom, None)?,
        None => sigma_true.clone(),
    };
    let synth = synthesize_data(data_mesh, &sigma_data, &currents, &coarse, opts)?;
    let model = ForwardModel::new(&coarse, &currents, opts)?;
    let (h_true, _) = model.forward(&sigma_true)?;
    let q = cfg.algorithm.q;
    let relative_mismatch = h_true
        .iter()
        .zip(&synth.fields)
        .map(|(h, y)| Ok(norm_y(&coarse, &h.sub(y), q)? / norm_y(&coarse, y, q)?))
        .collect::<Result<Vec<f64>, ExperimentError>>()?;
    let synthesis_s = start.elapsed().as_secs_f64();

    let implied_m = match (cfg.algorithm.nu, cfg.algorithm.c_h) {
        (None, _) => None,
        (Some(_), Some(_)) => cfg.algorithm.implied_m(cfg.penalty.c0(), None),
        (Some(_), None) => {
            let penalty = Penalty::new(&coarse, cfg.penalty)?;
            let sigma0 = penalty.prox(&NodalField::constant(&coarse, cfg.algorithm.initial_dual))?;
            let c_h = model.derivative_norm_estimate(&sigma0, 50)?;
            log::info!("estimated C_H = {c_h:.4e} at the initial conductivity");
            cfg.algorithm.implied_m(cfg.penalty.c0(), Some(c_h))
        }
    };

    let observed = cfg
        .currents
        .observed_angle()
        .map(|alpha| coarse.nodes().iter().map(|&p| polar_angle(p) <= alpha).collect::<Vec<bool>>());

    let runs = cfg
        .noise_levels
        .par_iter()
        .enumerate()
        .map(|(k, &level)| {
            let t0 = Instant::now();
            let seed = cfg.seed.wrapping_add(k as u64);
            let (measured, noise_delta) = add_noise_all(&coarse, &synth.fields, NoiseSpec { delta_e: level, seed }, q)?;
            let delta = match cfg.delta_rule {
                DeltaRule::Noise => noise_delta,
                DeltaRule::Total => measured
                    .iter()
                    .zip(&h_true)
                    .map(|(y, h)| norm_y(&coarse, &y.sub(h), q))
                    .collect::<Result<Vec<_>, _>>()?,
            };
            let penalty = Penalty::new(&coarse, cfg.penalty)?;
            let mut solver = Solver::new(&model, &penalty, cfg.algorithm.clone())?;
            let obs = Observations { data: measured, delta };
            let outcome = solver.run(&obs, Some(&sigma_true))?;
            let (reconstructed, _) = model.forward(&outcome.sigma)?;
            let final_residuals = reconstructed
                .iter()
                .zip(&obs.data)
                .map(|(h, y)| norm_y(&coarse, &h.sub(y), q))
                .collect::<Result<Vec<_>, _>>()?;
            let metrics = MetricsReport::compute(&coarse, &outcome.sigma, &sigma_true);
            let (e_l1_observed, e_l1_occluded) = match &observed {
                Some(mask) => {
                    let hidden: Vec<bool> = mask.iter().map(|b| !b).collect();
                    (
                        Some(rel_err_l1_masked(&coarse, &outcome.sigma, &sigma_true, mask)),
                        Some(rel_err_l1_masked(&coarse, &outcome.sigma, &sigma_true, &hidden)),
                    )
                }
                None => (None, None),
            };
            log::info!("noise {level}: n_delta = {}, e_L1 = {:.4}", outcome.n_delta, metrics.e_l1);
            let summary = RunSummary {
                noise_level: level,
                directory: level_dir(level),
                mode: cfg.algorithm.mode,
                penalty: cfg.penalty.kind,
                n_delta: outcome.n_delta,
                converged: outcome.converged,
                e_l1: metrics.e_l1,
                e_tv: metrics.e_tv,
                psnr: metrics.psnr,
                e_l1_observed,
                e_l1_occluded,
                final_bregman: outcome.final_bregman,
                delta: obs.delta.clone(),
                final_residuals,
                tau: cfg.algorithm.tau,
                sweeps: outcome.sweeps.len(),
                timings: RunTimings { reconstruction_s: t0.elapsed().as_secs_f64() },
            };
            Ok(RunArtifacts { summary, outcome, measured: obs.data, reconstructed })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;

    let summary = ExperimentSummary {
        config: cfg.clone(),
        mesh: MeshInfo {
            coarse_nodes: coarse.node_count(),
            coarse_triangles: coarse.triangle_count(),
            fine_nodes: data_mesh.node_count(),
            fine_triangles: data_mesh.triangle_count(),
            transfer_fallbacks: synth.fallbacks,
            relative_mismatch,
        },
        runs: runs.iter().map(|r| r.summary.clone()).collect(),
        implied_m,
        timings: ExperimentTimings { synthesis_s, total_s: start.elapsed().as_secs_f64() },
    };
    Ok(ExperimentResult { summary, coarse, sigma_true, exact: synth.fields, runs })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(IoError::from)?;
    Ok(())
}

/// Writes every artifact under `cfg.output_dir`.
pub fn write_experiment(result: &ExperimentResult, out: &Path) -> Result<(), ExperimentError> {
    let mesh = &result.coarse;
    for run in &result.runs {
        let dir = out.join(&run.summary.directory);
        std::fs::create_dir_all(&dir).map_err(IoError::from)?;
        write_json(&dir.join("summary.json"), &run.summary)?;
        write_residuals_csv(&dir.join("residuals.csv"), &run.outcome.substeps)?;
        write_sweeps_csv(&dir.join("sweeps.csv"), &run.outcome.sweeps)?;
        write_vtk(
            &dir.join("sigma_rec.vtk"),
            mesh,
            "reconstructed conductivity",
            &[("sigma_rec", &run.outcome.sigma)],
            &[],
        )?;
        write_vtk(&dir.join("sigma_true.vtk"), mesh, "true conductivity", &[("sigma_true", &result.sigma_true)], &[])?;
        for (i, ((y, yd), h)) in result.exact.iter().zip(&run.measured).zip(&run.reconstructed).enumerate() {
            write_vtk(
                &dir.join(format!("power_density_{i}.vtk")),
                mesh,
                &format!("power density for current {i}"),
                &[],
                &[("h_exact", y), ("h_measured", yd), ("h_reconstructed", h)],
            )?;
        }
    }
    write_json(&out.join("summary.json"), &result.summary)
}

/// Removes what a failed write left behind.
fn cleanup(out: &Path, result: &ExperimentResult, created_root: bool) {
    for run in &result.runs {
        let _ = std::fs::remove_dir_all(out.join(&run.summary.directory));
    }
    let _ = std::fs::remove_file(out.join("summary.json"));
    if created_root {
        let _ = std::fs::remove_dir(out);
    }
}

/// Computes and writes one experiment. Nothing is left on disk on failure.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary, ExperimentError> {
    let result = compute_experiment(cfg)?;
    let out = &cfg.output_dir;
    let created_root = !out.exists();
    if let Err(e) = std::fs::create_dir_all(out)
        .map_err(IoError::from)
        .map_err(ExperimentError::from)
        .and_then(|_| write_experiment(&result, out))
    {
        cleanup(out, &result, created_root);
        return Err(e);
    }
    Ok(result.summary)
}

pub fn run_experiment_file(path: &Path) -> Result<ExperimentSummary, ExperimentError> {
    run_experiment(&ExperimentConfig::load(path)?)
}

/// Side-by-side results of two experiments at matching noise levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub noise_level: f64,
    pub n_delta: [usize; 2],
    pub converged: [bool; 2],
    pub e_l1: [f64; 2],
    pub e_tv: [f64; 2],
    pub psnr: [Psnr; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub labels: [String; 2],
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn from_summaries(labels: [String; 2], a: &ExperimentSummary, b: &ExperimentSummary) -> Self {
        let rows = a
            .runs
            .iter()
            .filter_map(|ra| {
                let rb = b.runs.iter().find(|rb| rb.noise_level == ra.noise_level)?;
                Some(ComparisonRow {
                    noise_level: ra.noise_level,
                    n_delta: [ra.n_delta, rb.n_delta],
                    converged: [ra.converged, rb.converged],
                    e_l1: [ra.e_l1, rb.e_l1],
                    e_tv: [ra.e_tv, rb.e_tv],
                    psnr: [ra.psnr, rb.psnr],
                })
            })
            .collect();
        Self { labels, rows }
    }

    pub fn to_table(&self) -> String {
        let fmt_psnr = |p: &Psnr| p.db().map_or_else(|| "exact".to_string(), |v| format!("{v:.3}"));
        let mut s = format!(
            "{:>8} | {:>8} {:>8} | {:>9} {:>9} | {:>8} {:>8}\n",
            "noise", "n_A", "n_B", "eL1_A", "eL1_B", "PSNR_A", "PSNR_B"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:>8} | {:>7}{} {:>7}{} | {:>9.6} {:>9.6} | {:>8} {:>8}\n",
                r.noise_level,
                r.n_delta[0],
                if r.converged[0] { " " } else { "*" },
                r.n_delta[1],
                if r.converged[1] { " " } else { "*" },
                r.e_l1[0],
                r.e_l1[1],
                fmt_psnr(&r.psnr[0]),
                fmt_psnr(&r.psnr[1]),
            ));
        }
        s.push_str(&format!("A = {}\nB = {}\n", self.labels[0], self.labels[1]));
        s
    }
}

/// Runs both configs and pairs their results by noise level.
pub fn compare_files(a: &Path, b: &Path) -> Result<(Comparison, [ExperimentSummary; 2]), ExperimentError> {
    let sa = run_experiment_file(a)?;
    let sb = run_experiment_file(b)?;
    let labels = [a.display().to_string(), b.display().to_string()];
    Ok((Comparison::from_summaries(labels, &sa, &sb), [sa, sb]))
}

/// Drops every `timings` object so summaries can be compared across runs.
pub fn strip_timings(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.remove("timings");
            map.values_mut().for_each(strip_timings);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timings),
        _ => {}
    }
}

/// Caps the global worker pool at `AET_THREADS` when set. Returns the cap.
pub fn init_threads_from_env() -> Result<Option<usize>, ExperimentError> {
    let Ok(raw) = std::env::var("AET_THREADS") else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| ExperimentError::Config(format!("AET_THREADS must be a positive integer, got `{raw}`")))?;
    // a pool that is already built keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}
