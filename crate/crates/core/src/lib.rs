//! Graph-guided selective state-space diffusion for predicting the next image
//! in a longitudinal sequence.
//!
//! A U-shaped Mamba denoiser is steered by a parallel control pathway whose
//! patch features are organized into a graph, filtered spatially or
//! spectrally, and injected into the decoder through zero-initialized
//! projections.

pub mod anatgraph;
pub mod controlnet;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod ssm;
pub mod synthdata;

pub use error::{Error, Result};
