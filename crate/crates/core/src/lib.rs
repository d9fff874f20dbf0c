//! Probing toolkit for causal transformer language models.
//!
//! The crate bundles a small decoder-only transformer with its own
//! reverse-mode differentiation, prompt-based probes (pattern, verbalizer
//! and a learned key/value prefix), diagnostic classifiers over frozen
//! activations, exactly-K attention-head pruning, and the measurements built
//! on top of them.

pub mod analysis;
pub mod autograd;
pub mod container;
pub mod data;
pub mod diagnostic;
pub mod error;
pub mod experiment;
pub mod lm;
pub mod methods;
pub mod optim;
pub mod prompting;
pub mod pruning;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
