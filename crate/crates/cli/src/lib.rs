//! Command-line driver: phantom generation, training, evaluation, cohort
//! comparison, parameter counts and the over-segmentation demonstrator.

pub mod commands;
pub mod config;
pub mod report;

use sgnet_core::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Infeasible(_) => exit::CONFIG,
        Error::Data(_) | Error::Io { .. } | Error::Format(_) | Error::Stats(_) => exit::DATA,
        Error::Numeric(_) => exit::NUMERIC,
    }
}
