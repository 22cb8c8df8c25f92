//! Representation learning and clustering for irregularly sampled multivariate
//! time series with missing values.
//!
//! The pipeline: episodes are sets of (time, feature, value) observation
//! triplets plus a static vector. An attention encoder maps each episode to a
//! fixed-width representation, pretrained on a value-forecasting proxy task
//! with a masked MSE loss so that missing values never need imputation. The
//! representations are clustered by an iterative loop that alternates K-means
//! pseudo-labeling with joint encoder/classifier training, scored by internal
//! validity indices, characterized statistically, and cross-validated across
//! cohorts.

pub mod cluster;
pub mod data;
pub mod encoder;
pub mod error;
pub mod forecast;
pub mod numeric;
pub mod slac;
pub mod stats;
pub mod synth;
pub mod util;
pub mod validate;

pub use error::{Result, SlacError};
