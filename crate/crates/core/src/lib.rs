//! Modular, compositional, rehearsal-free continual learning for sequence
//! classifiers, built on a small from-scratch transformer.
//!
//! Each task gets its own parameter-efficient module (prefix or low-rank)
//! over a frozen backbone. While a task trains, earlier frozen modules are
//! mixed in with weights given by the cosine similarity between the input's
//! pooled embedding and learned per-task feature vectors.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod learner;
pub mod mocl;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod peft;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{MoclError, Result};
pub use eval::Protocol;
pub use learner::{CilPrediction, LearnerState, Method};
pub use rng::SeedTree;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
