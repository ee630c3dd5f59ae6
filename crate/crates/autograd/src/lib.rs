//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! Every value is a [`Tensor`] and every computation is recorded on a
//! [`Graph`] tape. Calling [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar output with respect to every node that
//! needs one. Model weights live in a [`ParamStore`] outside the tape so the
//! same weights can back many independent graphs.
//!
//! All arithmetic is generic over [`Scalar`], so the same model can run in
//! `f32` for speed or `f64` for gradient checks.

mod graph;
pub mod nn;
pub mod optim;
mod params;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

pub use graph::{Gradients, Graph, Var};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;

/// Floating-point element type: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("gradient error: {0}")]
    Grad(String),
}

pub type Result<T> = std::result::Result<T, Error>;
