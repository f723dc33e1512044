//! Non-contrastive deep clustering on the unit hypersphere.
//!
//! An online/target/predictor network triple is trained with an
//! augmented instance-alignment loss (Gaussian positive sampling in the
//! embedding space) plus a prototypical contrastive loss over mini-batch
//! cluster centers. Pseudo-labels come from spherical k-means on target
//! features, refreshed every `r` epochs.

pub mod autograd;
pub mod clustering;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use error::{NccError, Result};
