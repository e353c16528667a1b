//! Dense-tensor math with reverse-mode automatic differentiation.
//!
//! The engine is define-by-run: a [`Tape`] records every operation whose
//! inputs are tracked, and [`Tape::backward`] replays the record in
//! reverse to accumulate gradients. Tapes are rebuilt for every forward
//! pass, which keeps variable-length sequence models simple. All values
//! are `f64`; matrix products go through a cache-blocked GEMM kernel.

mod adam;
mod checkpoint;
mod params;
mod tape;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use params::{uniform_init, BoundParams, ParamSet};
pub use tape::{Tape, Var};

use thiserror::Error;

/// Errors from tensor construction, tape operations, and backward.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward has already run on this tape")]
    BackwardAlreadyRun,
    #[error("loss does not depend on any tracked parameter")]
    DetachedGraph,
    #[error("no gradient for parameter `{0}` (run backward first)")]
    MissingGradient(String),
}

/// A dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `values` matches `shape`.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(TensorError::InvalidArgument {
                op: "tensor",
                msg: format!("shape {:?} expects {} values, got {}", shape, numel, values.len()),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, values: vec![0.0; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], values: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// C[m,n] (+)= alpha * A' * B' with optional logical transposes of the
/// stored row-major operands. `beta` scales the existing C (1.0
/// accumulates, 0.0 overwrites).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
