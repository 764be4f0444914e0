//! File formats, experiment plumbing and the `collapse-lab` command line
//! around [`collapse_core`].

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod rollout_log;

pub use error::{LabError, Result};
