//! Acousto-electric tomography: recover a conductivity on a disk from interior
//! power densities `H_i(σ) = σ|∇u_i(σ)|²` with a two-point-gradient Kaczmarz
//! iteration and convex penalties.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod fem;
pub mod io;
pub mod mesh;
pub mod metrics;
pub mod operator;
pub mod penalty;
pub mod phantom;
pub mod tpg;

pub use error::*;
pub use fem::{ElementField, NodalField};
pub use mesh::{generate_disk_mesh, TriMesh};
