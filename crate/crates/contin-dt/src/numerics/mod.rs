//! Dense f32 tensors with reverse-mode automatic differentiation, the
//! primitive layers used by the transformer models, a bias-corrected
//! adaptive-moment optimizer with decoupled weight decay, and a seedable
//! splittable PRNG.

mod adam;
mod gradcheck;
mod linalg;
mod rng;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::finite_diff_check;
pub use rng::Rng;
pub use tape::{cosine_similarity, Tape, Value};
pub use tensor::{Param, ParamId, ParamStore, Tensor};

use std::fmt;

/// Errors raised by tensor construction, graph operations, and the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub enum NumericsError {
    /// Shapes are incompatible for the requested operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Data length does not match the product of the shape.
    DataLength { expected: usize, got: usize },
    /// A NaN or infinity reached a boundary that requires finite values.
    NonFinite { context: &'static str },
    /// The operation needs a scalar (single-element) tensor.
    NotScalar { shape: Vec<usize> },
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericsError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            NumericsError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            NumericsError::NonFinite { context } => {
                write!(f, "non-finite value in {context}")
            }
            NumericsError::NotScalar { shape } => {
                write!(f, "expected a scalar tensor, got shape {shape:?}")
            }
        }
    }
}

impl std::error::Error for NumericsError {}
