//! Files, experiment runner and command line around `lupi-core`.
//!
//! `lupi-core` holds the numerics and stays `no_std`; this crate adds the
//! checkpoint format, PGM/CSV/JSON outputs, the resumable two-stage
//! experiment and the `lupi` binary.

pub mod checkpoint;
pub mod cli;
mod error;
pub mod eval;
pub mod experiment;
pub mod formats;
pub mod report;

pub use error::{Error, Result};
pub use lupi_core;
