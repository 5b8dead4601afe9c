//! Synthetic-image detection with a token-bank reconstruction branch and a
//! frequency-aware enhancer on top of a frozen vision-transformer encoder.

pub mod archive;
pub mod backbone;
pub mod cfdl;
pub mod datasets;
pub mod enhancer;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod nn;
pub mod sts;
pub mod training;

pub use error::{Result, SddError};
