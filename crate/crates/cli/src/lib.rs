//! The `specret` pipeline as library calls; `main.rs` only parses arguments and maps errors
//! to exit codes.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod selftest;

pub use config::{load_config, Overrides, RunConfig, Stage};

/// Exit code for a failed command: 3 for numeric failures, 2 for everything else.
pub fn exit_code(e: &specret_core::Error) -> i32 {
    match e {
        specret_core::Error::Numeric(_) => 3,
        _ => 2,
    }
}
