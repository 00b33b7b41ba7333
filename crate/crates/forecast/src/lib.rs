//! Desk-scale multimodal motion forecasting: a world-model network with a
//! mixture-of-experts decoder, the corner-case corpus toolkit around it,
//! and a deterministic training/evaluation harness.

pub mod batch;
pub mod config;
pub mod corpus;
pub mod error;
pub mod model;
pub mod objectives;
pub mod params;
pub mod runtime;
pub mod scenes;

pub use config::{CurationConfig, FileConfig, LossProfile, TrainConfig};
pub use error::{Error, Result};
