//! File formats, datasets, configuration and commands for the `ccsbesr`
//! binary.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod image_io;
pub mod logs;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "CCSBESR_THREADS";
