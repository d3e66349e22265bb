//! Desk-scale hybrid static-dynamic visual correspondence learning.
//!
//! A small fully-convolutional dual encoder is trained on overlapping crops
//! of unlabeled images: the static objective aligns embeddings of
//! geometrically matching locations, the dynamic objective aligns forward
//! and backward pseudo-dynamic signals predicted between the two views.
//! The learned features are evaluated by affinity-based label propagation
//! on videos with region (J) and boundary (F) metrics.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod geometry;
pub mod imgio;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod propagation;
pub mod store;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
