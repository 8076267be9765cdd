//! Frequency-aware adaptive contrastive learning for sequential
//! recommendation: augmentation, reweighting, a small `f64` encoder with
//! reverse-mode gradients, training, and evaluation.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod objective;
pub mod reweight;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{FaclError, Result};
