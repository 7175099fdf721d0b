//! Files, configuration and the command line around `gavs-core`.
//!
//! The core crate is `no_std` and never touches the filesystem; this crate
//! adds the on-disk dataset layout (PPM frames, PGM masks, text audio and a
//! JSON manifest), a versioned binary checkpoint, layered run configuration,
//! the train/eval/ablation pipelines and the `gavs` binary.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod pnm;
pub mod study;

pub use error::{Error, Result};
