//! Reconstruction quality: relative `L¹` and total-variation errors and PSNR.
//!
//! Nodes play the role of pixels. Every mean and norm is weighted by the
//! lumped node masses so values do not depend on local mesh density.

use serde::{Deserialize, Serialize};

use crate::fem::NodalField;
use crate::mesh::TriMesh;
use crate::penalty::total_variation;

/// `‖a - b‖_{L¹}` restricted to nodes where `mask` holds.
fn masked_l1(mesh: &TriMesh, a: &[f64], b: Option<&[f64]>, mask: Option<&[bool]>) -> f64 {
    mesh.node_mass()
        .iter()
        .enumerate()
        .filter(|(n, _)| mask.is_none_or(|m| m[*n]))
        .map(|(n, w)| w * (a[n] - b.map_or(0.0, |b| b[n])).abs())
        .sum()
}

/// `‖σ_rec - σ†‖_{L¹} / ‖σ†‖_{L¹}`.
pub fn rel_err_l1(mesh: &TriMesh, rec: &NodalField, truth: &NodalField) -> f64 {
    masked_l1(mesh, &rec.values, Some(&truth.values), None) / masked_l1(mesh, &truth.values, None, None)
}

/// Relative `L¹` error over the nodes selected by `mask`.
pub fn rel_err_l1_masked(mesh: &TriMesh, rec: &NodalField, truth: &NodalField, mask: &[bool]) -> f64 {
    masked_l1(mesh, &rec.values, Some(&truth.values), Some(mask)) / masked_l1(mesh, &truth.values, None, Some(mask))
}

/// `| TV(σ_rec) - TV(σ†) | / TV(σ†)`.
pub fn rel_err_tv(mesh: &TriMesh, rec: &NodalField, truth: &NodalField) -> f64 {
    let t = total_variation(mesh, truth);
    (total_variation(mesh, rec) - t).abs() / t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Psnr {
    Db(f64),
    /// Zero mean-squared error.
    Exact(ExactTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExactTag {
    Exact,
}

impl Psnr {
    pub fn db(&self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(*v),
            Psnr::Exact(_) => None,
        }
    }
}

/// Mass-weighted mean squared nodal error.
pub fn mse(mesh: &TriMesh, rec: &NodalField, truth: &NodalField) -> f64 {
    let m = mesh.node_mass();
    let total: f64 = m.iter().sum();
    m.iter().zip(&rec.values).zip(&truth.values).map(|((w, a), b)| w * (a - b).powi(2)).sum::<f64>() / total
}

/// `10 log₁₀(MAX² / MSE)` with `MAX` the largest nodal value of `σ†`.
pub fn psnr(mesh: &TriMesh, rec: &NodalField, truth: &NodalField) -> Psnr {
    psnr_from_parts(truth.max_value(), mse(mesh, rec, truth))
}

pub fn psnr_from_parts(max: f64, mse: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Exact(ExactTag::Exact)
    } else {
        Psnr::Db(10.0 * (max * max / mse).log10())
    }
}

/// Summary metrics of one reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub e_l1: f64,
    pub e_tv: f64,
    pub psnr: Psnr,
}

impl MetricsReport {
    pub fn compute(mesh: &TriMesh, rec: &NodalField, truth: &NodalField) -> Self {
        Self { e_l1: rel_err_l1(mesh, rec, truth), e_tv: rel_err_tv(mesh, rec, truth), psnr: psnr(mesh, rec, truth) }
    }
}
