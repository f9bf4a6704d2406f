//! Robust image classification by latent-guided corrective diffusion.
//!
//! The pipeline has three stages: a transformer backbone whose early blocks
//! feed per-level *shallow mappings* into label space, a guided Gaussian
//! diffusion chain that refines each intermediate prediction by reverse
//! sampling, and a bi-level *nested ensemble* that hard-votes over the
//! resulting K x M prediction samples and reports a temperature-calibrated
//! probability alongside instance-level uncertainty (prediction interval
//! width and variance).

pub mod backbone;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod perturb;
pub mod pipeline;
pub mod report;
pub mod shallow;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
