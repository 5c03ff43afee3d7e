//! Seizure detection from compressed EEG latents.

pub mod autodiff;
mod bytes;
pub mod dsp;
pub mod edgewire;
pub mod error;
pub mod eval;
pub mod gbdt;
pub mod ingest;
pub mod quant;
pub mod vae;

pub use error::{Error, Result};
