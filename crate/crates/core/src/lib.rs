//! Multi-cue forensic detector core: cue extraction (raw image, wavelet
//! high-frequency, chromaticity inconsistency), a frozen toy transformer
//! trunk with mixture-of-encoder adapters, and a deterministic
//! train/evaluate stack with analytic gradients verified against finite
//! differences.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod cues;
pub mod error;
pub mod image;
pub mod loss;
pub mod mat;
pub mod moea;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
