//! Conditional diffusion on toy 2D Gaussian mixtures.
//!
//! Trains small noise-prediction MLPs with either the plain denoising loss
//! (with conditioning dropout) or a guidance-aware loss that trains the
//! classifier-free-guided combination directly, then measures how well
//! guided samples match an analytic tilted target `p(z) p(c|z)^w`.

// `!(x > 0.0)` is used on purpose so NaN fails validation; index loops are
// kept where several arrays are walked in lockstep.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaldata;
pub mod guidance;
pub mod harness;
pub mod numerics;
pub mod sampling;
pub mod training;

pub use error::{LabError, Result};
