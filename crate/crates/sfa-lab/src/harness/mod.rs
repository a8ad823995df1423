//! Experiment orchestration: config files, checkpoint serialization, and
//! the driver that turns a parsed config into CSV results on disk.

pub mod checkpoint;
pub mod config;
pub mod runner;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance};
pub use config::{ExperimentConfig, StreamSpec};
pub use runner::{
    format_sig6, merge_checkpoints, run_experiment, run_sweep, MergeMode, SummaryRow,
};
