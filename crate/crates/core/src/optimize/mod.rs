//! Optimizers and the alternating inference loop.
//!
//! Adam handles the network parameters; the image-shaped intermediate
//! variable gets quasi-Newton steps (dense BFGS up to 1024 dimensions,
//! L-BFGS beyond) with Armijo backtracking. [`alternate_optimize`] ties
//! the two together and emits a [`crate::record::RunRecord`].

mod adam;
mod bfgs;
mod driver;
mod lbfgs;
mod linesearch;
mod runloop;
mod subspace;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use bfgs::DenseBfgs;
pub use driver::{minimize_bfgs_dense, minimize_lbfgs, MinimizeOptions, MinimizeResult};
pub use lbfgs::LbfgsHistory;
pub use linesearch::{armijo_search, ArmijoParams, ArmijoResult};
pub use runloop::{alternate_optimize, DncfObjective, GradScope, LoopConfig, LossTerms};
pub use subspace::{subspace_residual, CnscProbe};

/// Relative curvature threshold below which a quasi-Newton update is
/// skipped rather than applied.
pub const CURVATURE_GUARD: f64 = 1e-12;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
