//! Command-line front end: configuration, corpus generation, training,
//! refinement, evaluation and figures.

pub mod args;
pub mod commands;
pub mod config;
pub mod plot;

use resgrad_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Audio(_) | Error::Shape(_) | Error::Format(_) => EXIT_DATA,
        Error::Numerical(_) => EXIT_NUMERICAL,
    }
}
