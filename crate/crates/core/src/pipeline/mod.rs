//! Study orchestration: configuration, staged execution with an on-disk
//! volume cache, and report emission.

pub mod cache;
pub mod config;
pub mod report;
pub mod study;

pub use config::{CellFilter, StudyConfig};
pub use report::emit_report;
pub use study::{run_study, CellId, CellResult, Study, StudyReport};

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "OBSBENCH_THREADS";

/// Worker count requested through `OBSBENCH_THREADS`, if any.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        _ => Ok(None),
    }
}

/// Runs `f` on a pool of `threads` workers (rayon's default when `None`).
pub fn with_workers<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}
