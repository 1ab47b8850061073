//! Optimizer, dropout, run configuration and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod dropout;
pub mod optim;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, states_identical, write_checkpoint};
pub use config::{DatasetSpec, RunConfig, SignalKind, TagScheme};
pub use dropout::{apply_dropout, dropout_mask, Mode};
pub use optim::{adagrad_step, AdaGrad, LrSchedule};
