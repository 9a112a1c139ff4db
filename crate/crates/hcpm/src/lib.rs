//! File formats, configuration and drivers around `hcpm-core`.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gendata;
pub mod log;
pub mod matches;
pub mod pgm;
pub mod sidecar;
pub mod train;

pub use error::{IoError, Result};
