//! Desk-scale few-shot GAN adaptation with Fisher-probed kernel modulation.
//!
//! The crate trains small GANs on synthetic source domains, probes per-kernel
//! importance for a few-shot target via Fisher information, and adapts with
//! rank-constrained kernel modulation on important kernels and plain
//! fine-tuning elsewhere. Baselines (EWC, AdaFM, freeze), mode-collapse
//! metrics, and a sweep CLI round out the experiment surface.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod importance;
pub mod metrics;
pub mod modulation;
pub mod nets;
pub mod persist;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};

pub mod cli;
