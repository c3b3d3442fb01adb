//! Library surface of the command-line harness; the binary in `main.rs` is a
//! thin argument-parsing wrapper so integration tests can drive commands
//! directly.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use commands::{cmd_ablate, cmd_bench, cmd_gradcheck, cmd_heatmap, cmd_train, AggChoice};
pub use config::RunConfig;
pub use error::{CliError, Result};
