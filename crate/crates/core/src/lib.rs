//! Two-stage facial affect analysis at toy scale: masked-autoencoder
//! pretraining and fine-tuning for frame-wise features, clip-wise temporal
//! fusion of vision and audio features with a transformer encoder, and the
//! metric and smoothing machinery around them.

pub mod checkpoint;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod features;
pub mod losses;
pub mod mae;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod postprocess;
pub mod seed;
pub mod synth;
pub mod tmf;

pub use error::{Error, Result};
