//! Library half of the `dmad` binary: config document, exit-code mapping and
//! the subcommands, exposed so integration tests can drive them in-process.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_eval, cmd_explain, cmd_gen, cmd_train_student, cmd_train_teacher, Split};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
