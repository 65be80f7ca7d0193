//! Neighboring-pixel anomaly detection over pre-extracted feature maps.
//!
//! Training fits two per-pixel Gaussian fields from nominal feature maps: a
//! similarity-weighted field pooled over each pixel's neighborhood, and a
//! field over neighborhood-averaged features. A k-means bank of the averaged
//! features backs the image-level score. Scoring produces a pixel anomaly map
//! (geometric mean of the two Mahalanobis maps) and an image score.

pub mod aggregate_bank;
pub mod bundle;
pub mod channel_reduce;
pub mod error;
pub mod evaluation;
pub mod feature;
pub mod gaussian_field;
pub mod inference;
pub mod linalg;
pub mod neighbor_sim;
pub mod pipeline;
pub mod synth;
pub mod tensor_store;

pub use error::{Error, Result};
pub use feature::FeatureMap;
pub use pipeline::{ModelBundle, RunConfig};
