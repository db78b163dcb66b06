//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records primitive applications in order. Values are computed
//! eagerly when a primitive is applied; [`Tape::backward`] then sweeps the
//! tape in reverse and returns the adjoint of every parameter leaf.
//!
//! The primitive set is closed: matmul, add, sub, elementwise mul, scalar
//! mul, relu, exp, `log_eps`, row softmax, axis sum/mean/max, concat,
//! slice, plus the shape-only reshape and transpose.

mod array;
mod gradcheck;
mod pool;
mod tape;

use std::fmt;

use thiserror::Error;

pub use array::NumericArray;
pub use gradcheck::{check_gradients, GradCheckReport};
pub use tape::{Gradients, Tape, Var, DEFAULT_EPS_LOG};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    MatMul,
    Add,
    Sub,
    ElementwiseMul,
    ScalarMul,
    Relu,
    Exp,
    LogEps,
    RowSoftmax,
    SumAxis,
    MeanAxis,
    MaxAxis,
    Concat,
    Slice,
    Reshape,
    Transpose,
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PrimitiveKind::MatMul => "matmul",
            PrimitiveKind::Add => "add",
            PrimitiveKind::Sub => "sub",
            PrimitiveKind::ElementwiseMul => "elementwise_mul",
            PrimitiveKind::ScalarMul => "scalar_mul",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::Exp => "exp",
            PrimitiveKind::LogEps => "log_eps",
            PrimitiveKind::RowSoftmax => "row_softmax",
            PrimitiveKind::SumAxis => "sum_axis",
            PrimitiveKind::MeanAxis => "mean_axis",
            PrimitiveKind::MaxAxis => "max_axis",
            PrimitiveKind::Concat => "concat",
            PrimitiveKind::Slice => "slice",
            PrimitiveKind::Reshape => "reshape",
            PrimitiveKind::Transpose => "transpose",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: PrimitiveKind,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    InvalidOperand { op: PrimitiveKind, reason: String },
    #[error("log_eps: negative input {value} at index {index}")]
    NegativeLog { index: usize, value: f64 },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("variable {0} is not on this tape")]
    UnknownVar(usize),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("build is not deterministic: two forward passes gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}
