//! Nonparametric image restoration by per-image network optimization.
//!
//! Each restoration job fits a small convexity-regularized network to a
//! single degraded image at inference time: no training data, no
//! pretrained weights. The crate bundles the pieces that make this work:
//!
//! - [`autodiff`]: a reverse-mode tape over dense `f64` tensors.
//! - [`networks`]: skip encoder-decoder and input-convex builders.
//! - [`filters`]: classical operators (Gaussian, bicubic, TV) and metrics.
//! - [`convexify`]: soft nonnegativity regularizers and the adaptive
//!   shrink schedule for their weight.
//! - [`optimize`]: Adam, BFGS/L-BFGS with Armijo line search, and the
//!   alternating inference loop.
//! - [`tasks`]: denoise/inpaint/super-resolution/flash/defend objectives
//!   and end-to-end task runners.
//! - [`adversarial`]: gradient attacks, a toy classifier, and the
//!   purification defense.
//! - [`icnn`]: the 2-D hard-vs-soft convexity comparison experiment.

pub mod adversarial;
pub mod autodiff;
pub mod convexify;
pub mod error;
pub mod filters;
pub mod icnn;
pub mod networks;
pub mod optimize;
pub mod record;
pub mod rng;
pub mod tasks;

pub use autodiff::{Tape, Tensor, Value};
pub use error::DncfError;
