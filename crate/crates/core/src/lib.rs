//! mobiforge: a masked conditional-diffusion transformer for mobile-network
//! time series (base-station traffic, per-user app traffic, downlink RSRP),
//! with synthetic data generators, a desk-scale trainer, task-conditioned
//! samplers, and evaluation metrics.

pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod prompt_net;
pub mod report;
pub mod sampler;
pub mod schedule;
pub mod seeds;
pub mod semantic_vae;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
