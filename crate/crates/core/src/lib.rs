//! Molecular property regression with graph convolutions over atoms and
//! atom pairs, trained through a dynamic-batching graph compiler.

pub mod batcher;
pub mod config;
pub mod engine;
pub mod error;
pub mod evalkit;
pub mod featurize;
pub mod finetune;
pub mod fixtures;
pub mod hash;
pub mod model;
pub mod molio;
pub mod pipeline;
pub mod synth;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
