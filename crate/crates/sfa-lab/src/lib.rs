//! A small laboratory for continual learning on multilayer perceptrons:
//! sequential fine-tuning with periodic weight averaging, penalty-based and
//! rehearsal baselines, and post-hoc model-merging operators, all with
//! deterministic seeding so every number is reproducible bit for bit.

mod error;
pub mod rng;

pub mod data;
pub mod harness;
pub mod merge;
pub mod metrics;
pub mod nnet;
pub mod param;
pub mod trainers;

pub use error::{Error, Result};
