//! File formats, configuration, training harness, judge client and CLI
//! plumbing around `occdir-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod formats;
pub mod judge;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
