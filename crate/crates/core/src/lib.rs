//! Concept recommendation from learner histories, a prerequisite graph and
//! enhanced concept text.
//!
//! The pipeline runs in four trained stages: a graph adapter pre-trained by
//! edge-dropout contrastive learning, a GRU knowledge tracer, self-supervised
//! sequence pre-training of a causal Transformer, and end-to-end fine-tuning on
//! next-concept prediction. See [`trainer::run_pipeline`].

pub mod adapter;
pub mod autodiff;
pub mod config;
pub mod datasets;
pub mod encoder;
pub mod error;
pub mod evalkit;
#[cfg(test)]
mod gradcheck;
pub mod interp;
pub mod kgraph;
pub mod ktrace;
pub mod model;
pub mod params;
pub mod recommender;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod workflow;

pub use error::{Error, Result};
