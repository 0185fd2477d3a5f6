//! Hippocampus-style segmentation with three orientation-specialized 2D
//! encoder-decoders trained on extended-2D patches, fused by activation
//! averaging and cleaned by connected-component filtering.

pub mod cli;
pub mod error;
pub mod fusion;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod parallel;
pub mod phantoms;
pub mod plot;
pub mod postprocess;
pub mod sampling;
pub mod training;
pub mod volumes;

pub use error::{Error, Result};
