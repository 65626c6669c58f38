//! Cross-receiver RF fingerprint identification lab.
//!
//! - [`synth`]: multi-receiver impaired IQ data generation
//! - [`dsp`]: detection, filtering, framing, STFT, interference, resampling
//! - [`numerics`]: tensors and layers with explicit backward passes
//! - [`riei`]: the disentangling model, its losses and alternating training
//! - [`fed`]: federated training with one-bit compressed uplinks
//! - [`harness`]: dataset files, experiments, sweeps and diagnostics

pub mod dsp;
pub mod error;
pub mod fed;
pub mod harness;
pub mod numerics;
pub mod riei;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
