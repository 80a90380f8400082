//! Transformer-based anomaly detection and diagnosis for multivariate time
//! series.
//!
//! The pipeline normalizes a training series, cuts it into sliding windows
//! with longer contexts, and trains a two-decoder transformer with a
//! two-phase adversarial objective. At test time each window is scored by
//! its reconstruction error, a peaks-over-threshold model turns per-dimension
//! scores into labels, and the per-dimension scores rank the likely root
//! causes.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod artifact;
pub mod dataset;
pub mod detection;
pub mod diffcore;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod seed;
pub mod thresholding;
pub mod training;

pub use error::{Error, Result};
