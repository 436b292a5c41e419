//! Toy-scale laboratory for autoregressive atmospheric forecasting with a
//! minimally modified shifted-window transformer.
//!
//! The crate is organized around a synthetic lat-lon "atmosphere" with known
//! dynamics ([`data`]), a non-hierarchical windowed-attention model built on a
//! small reverse-mode tape ([`graph`], [`model`]), the loss-weighting ablation
//! axes ([`loss`]), an Adam training loop with multi-step fine-tuning
//! ([`training`]), autoregressive inference ([`rollout`]), and a verification
//! suite of deterministic and lagged-ensemble scores ([`verify`]).
//!
//! All numerics are generic over the scalar type through [`Scalar`]; training
//! and storage run in `f32`, gradient verification in `f64`.

pub mod data;
pub mod error;
pub mod graph;
pub mod grid;
pub mod loss;
pub mod model;
pub mod rollout;
pub mod training;
pub mod util;
pub mod verify;

pub use error::{Error, Result};

/// Floating-point scalar usable throughout the crate: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssignOps
    + ndarray::ScalarOperand
    + rustfft::FftNum
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`.
    fn real(v: f64) -> Self;
    /// Widening conversion to `f64`.
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn real(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn real(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Storage precision for datasets, forecasts, and checkpoints.
pub type StorageReal = f32;

/// Tape graph in training precision.
pub type GraphF32 = graph::Graph<f32>;
/// Tape graph in verification precision.
pub type GraphF64 = graph::Graph<f64>;

/// Model parameters in training precision.
pub type ParamsF32 = model::ParameterSet<f32>;
/// Model parameters in verification precision.
pub type ParamsF64 = model::ParameterSet<f64>;
