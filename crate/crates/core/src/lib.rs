//! Generative modeling for function-valued data.
//!
//! The pipeline: trace-class Gaussian random fields corrupt function samples
//! across a ladder of noise levels, a Fourier neural operator learns the
//! level-conditional score, and annealed Langevin dynamics integrates the
//! learned score back into samples. Everything is discretized on uniform
//! grids but parameterized so that models and statistics transfer across
//! resolutions.

pub mod cli;
pub mod corruption;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod fno;
pub mod grf;
pub mod grid;
pub mod sampler;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
