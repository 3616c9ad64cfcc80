//! Dataset generation, training, prediction, evaluation and graph inspection
//! for graph-controlled Mamba diffusion.

pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod train;

pub use config::RunConfig;
pub use error::{CliError, Result};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "MBCT_THREADS";

/// Sizes the global worker pool from `MBCT_THREADS`, if set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::invalid(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::invalid(format!("cannot size thread pool: {e}")))
}
