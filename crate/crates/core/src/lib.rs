//! Diffusion-bridge translation of structure volumes into function volumes.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`bridge`]: closed-form schedules, bridge marginals, h-transform and
//!   pred-x preconditioning.
//! - [`network`]: the adaLN-Zero patch transformer and its reverse pass.
//! - [`sampler`]: reverse-time Euler–Maruyama, Heun and hybrid integration.
//! - [`data`]: synthetic paired cohorts, auxiliary encoding and
//!   propensity-balanced splits.
//! - [`training`]: the weighted denoising objective, Adam, model selection
//!   and local adaptation.
//! - [`metrics`]: image-quality metrics, paired tests and the sensitivity and
//!   step-count experiments.

pub mod bridge;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod sampler;
pub mod training;
pub mod util;
pub mod volume;

pub use error::{Error, Result};
pub use volume::Volume;
