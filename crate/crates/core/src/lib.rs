//! Latent program networks for colored-grid program induction.
//!
//! A task is a handful of input/output grid pairs produced by one hidden
//! program. The encoder maps each pair to a Gaussian over a latent program
//! vector, the latents are averaged, optionally refined by searching latent
//! space against the decoder's likelihood of the given pairs, and the decoder
//! then executes the refined latent on new inputs.

pub mod decoder;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod grids;
pub mod model;
pub mod nn;
pub mod persistence;
pub mod search;
pub mod taskgen;
pub mod training;

pub use error::{Error, Result};
