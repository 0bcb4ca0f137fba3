//! Command-line experiment runner: configuration, study execution and
//! plot-ready outputs.

pub mod config;
pub mod figure;
pub mod runner;

pub use config::{parse_config, ExperimentConfig};
pub use runner::{replay, run_experiment, synth_data, Options};

use paddles_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NumericalIntegrity(_) => EXIT_NUMERICAL,
        Error::Io(_) => EXIT_IO,
        Error::Config(_) | Error::Usage(_) | Error::Input(_) | Error::Dimension(_) | Error::Json(_) => EXIT_CONFIG,
    }
}
