//! File formats, experiment runner and command line around [`glass_core`].

pub use glass_core as core;

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod runner;

pub use config::RunConfig;
pub use error::{GlassError, Result};
