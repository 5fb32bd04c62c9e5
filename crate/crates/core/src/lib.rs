//! Differentiable search over asymmetric spectral-spatial 3D convolution
//! blocks for hyperspectral pixel classification, plus the data handling,
//! training, and evaluation machinery around it.

pub mod a2sconv;
pub mod data;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod search;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
