//! Library surface of the command-line tool, exposed so integration tests
//! can drive the exact command implementations in-process.

pub mod commands;
pub mod config;

pub use commands::{cmd_evaluate, cmd_fuse, cmd_synth, cmd_train_cgfe, cmd_train_fusion};
pub use config::{Preset, RunConfig};
