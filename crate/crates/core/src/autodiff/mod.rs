//! Minimal reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Tape`] records every primitive application in creation order.
//! Values are [`Tensor`]s whose storage is shared, so registering model
//! parameters as leaves is cheap. [`Tape::backward`] walks the record in
//! reverse and accumulates gradients for every trainable leaf; fan-out is
//! handled by summation.

mod conv;
mod gradcheck;
mod tape;
mod tensor;

pub use conv::ConvGeom;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use tape::{Gradients, Primitive, Tape, Var};
pub use tensor::{Real, Tensor};

pub(crate) use tensor::gemm;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("index {index} out of range {bound} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("numeric fault: non-finite value produced by {op:?} at element {index}")]
    NumericFault { op: Primitive, index: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}
