//! Spectral-spatial graph reasoning for hyperspectral image classification.
//!
//! The crate is generic over the element type ([`Scalar`]: `f32` or `f64`).
//! Training runs in `f32`; gradient checks run in `f64`. The aliases at the
//! bottom of this file name the concrete instantiations.

pub mod data;
pub mod error;
pub mod graphspec;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod numcore;
pub mod pixmap;
mod scalar;
pub mod sagrn;
pub mod segrn;
pub mod superpix;
pub mod trainer;

pub use error::{Error, Result};
pub use numcore::{Tape, Tensor, Var};
pub use scalar::{DType, Scalar};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
