//! Correction stack for long-tailed fine-tuning of pre-trained models under
//! both data imbalance (skewed downstream labels) and parameter imbalance
//! (bias inherited from long-tailed pre-training).
//!
//! - [`adjustment`]: post-hoc and loss-time logit adjustment, the
//!   generalized zero-shot + fine-tuned ensemble, and backdoor fusion of
//!   several data-balanced models.
//! - [`prior`]: estimation of the inaccessible pre-training label prior.
//! - [`simkit`] and [`trainer`]: a desk-scale simulator with miniature
//!   foundation models.
//! - [`evaluation`]: group accuracies, nine-cell matrices, KNN probes.
//! - [`experiments`]: seeded end-to-end pipelines and their file outputs.

pub mod adjustment;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod io;
pub mod matrix;
pub mod par;
pub mod prior;
pub mod seeds;
pub mod simkit;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
