//! Pipeline plumbing around `stcm-core`: run configuration, dataset and
//! checkpoint files, and the synth / cluster / train / eval / plan / gradcheck verbs.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
mod error;
pub mod gradcheck;
pub mod pgm;

pub use error::{CliError, Result};
