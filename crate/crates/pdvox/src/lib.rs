//! Volumetric deep-learning engine for Parkinson's-disease classification
//! from 3-D brain scans: dense tensors with handwritten backward passes,
//! 3-D convolutional classifiers with optional demographic inputs, Adam
//! training, recall-weighted evaluation, occlusion heatmaps, and random
//! hyperparameter search; all deterministic under a fixed seed.

pub mod cli;
pub mod data;
pub mod error;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod search;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
