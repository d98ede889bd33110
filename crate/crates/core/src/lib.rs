//! Core engine for teaching a contrastive dual encoder to score image
//! descriptions above captions.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only pure
//! computation: a define-by-run reverse-mode tape, the transformer dual
//! encoder with LoRA adapters, distributed interchange interventions through
//! a learned rotation, the training objectives with Adam, integrated
//! gradients, synthetic data generation and the evaluation metrics.
//! File formats, the checkpoint container and the command line live in the
//! `descap` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod attribution;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod intervention;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod stats;
pub mod tensor;

#[cfg(test)]
mod testutil;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use intervention::{InterventionSite, MediationMode};
pub use model::{DualEncoder, LoraConfig, ModelConfig, Tokenizer};
pub use tensor::Tensor;
