//! Conditional normalizing flows over the high-frequency part of an image,
//! and the scores built on them for detecting covariate shift.
//!
//! Images are `[N, C, H, W]` [`Tensor`]s with values in `[0, 1]`. The main
//! pipeline is:
//!
//! 1. [`freq::decompose`] splits an image into a Gaussian-blurred low part
//!    and the residual high part.
//! 2. [`model::FlowModel`] maps the (dequantized) high part to a standard
//!    normal latent, conditioned on the low part.
//! 3. [`train::train`] fits the model with a likelihood objective plus an
//!    optional input-gradient penalty.
//! 4. [`score`] turns likelihood and input-gradient norm into per-sample
//!    scores, and [`metrics`] summarizes how well they separate two sets.
//!
//! [`corrupt`] generates shifted test sets and [`io`] handles datasets and
//! checkpoints on disk.

pub mod corrupt;
mod error;
pub mod freq;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod score;
pub mod train;

pub use covflow_autodiff::Tensor;
pub use error::{Error, Result};
