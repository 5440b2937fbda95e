//! Attention-based visual question answering: tensor core, question encoder,
//! feature ingest, stacked attention, answer classifier, trainer, evaluator,
//! and the `vqa` command-line harness.

pub mod ablation;
pub mod attention;
pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod export;
pub mod features;
pub mod gradcheck;
pub mod model;
pub mod par;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
