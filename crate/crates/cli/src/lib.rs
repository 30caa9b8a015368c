//! Experiment plumbing for the `swaptrain` command: configuration files,
//! tensor containers, dataset directories and the subcommands.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod io;

use swaptrain::Error;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}
