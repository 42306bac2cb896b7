//! Conditional-adapter transformers with learned task embeddings.
//!
//! The crate bundles a small reverse-mode autodiff engine over dense `f64`
//! tensors, a transformer text encoder with an MLM pretraining stage, three
//! adapter parametrizations (per-task, conditioned layer-norm + FiLM,
//! hypernetwork-generated), joint multitask training with task embeddings,
//! a deterministic synthetic task generator with label-free task aspects,
//! and the analytics used to study embedding spaces: nearest-neighbor
//! stability, PCA, GMM soft clustering, logistic probing, and ridge
//! regression of embeddings from aspects for zero-shot transfer.

pub mod adapters;
pub mod analytics;
pub mod artifact;
pub mod baselines;
pub mod config;
pub mod encoder;
pub mod error;
pub mod multitask;
pub mod task;
pub mod taskgen;
pub mod tensor;

pub use error::{CoreError, Result};
