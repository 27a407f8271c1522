//! Command-line pipeline around the core library: dataset generation, the
//! two denoiser trainings, controlled episodes, benchmarks, and SVG plots.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 when an episode's
//! environment blew up (outputs for the surviving episodes are still
//! written), 1 for anything else.

pub mod commands;
pub mod config;
pub mod plot;
pub mod results;

use cldpc_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BLOWUP: i32 = 3;

/// Process exit code for a failed command.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Blowup { .. } | Error::Unstable { .. } => EXIT_BLOWUP,
        _ => EXIT_OTHER,
    }
}
