//! File formats, the training and evaluation drivers, and the `maskvae`
//! command line, on top of `maskvae-core`.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod png;
pub mod train;

pub use checkpoint::Checkpoint;
pub use dataset::{Dataset, Manifest, Sample, Split};
pub use error::{Error, Result};
pub use maskvae_core as core;
