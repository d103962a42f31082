//! Differentiable toolkit for multi-repetition (NEX) MRI sampling optimization.
//!
//! The library jointly optimizes k-space sampling masks over the NEX×k-space
//! domain and an unrolled multi-repetition reconstruction network under a
//! fixed sampling budget, on synthetic phantom data. It ships the learned
//! and fixed baseline mask plans, the measurement operator, ROI-restricted
//! image-quality metrics, and probability-map analysis tools.
//!
//! Numeric kernels are generic over the scalar type (see [`scalar::Scalar`]);
//! the pipeline runs on the `f64` aliases exported at the crate root because
//! finite-difference gradient validation at the tolerances used here is not
//! reliable in single precision.

pub mod analysis;
pub mod error;
pub mod fft;
pub mod forward;
pub mod gradcheck;
pub mod metrics;
pub mod nxt;
pub mod pgm;
pub mod phantom;
pub mod recon;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};

/// Scalar type used by the full pipeline.
pub type Real = f64;
/// Real tensor at pipeline precision.
pub type Tensor = tensor::RealTensor<Real>;
/// Complex image (paired real channels) at pipeline precision.
pub type Image = tensor::ComplexImage<Real>;
/// Reverse-mode tape at pipeline precision.
pub type Graph = tape::Tape<Real>;
