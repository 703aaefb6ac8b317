//! File formats and subcommands of the `flowfield` binary.

pub mod commands;
pub mod error;
pub mod io;
pub mod score;

pub use commands::{cmd_eval, cmd_fit, cmd_simulate, EvalArgs, FitArgs, RunManifest, SimulateArgs, TruthFile};
pub use error::{CliError, CliResult};
