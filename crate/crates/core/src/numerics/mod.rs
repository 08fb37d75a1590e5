//! Dense `f64` arrays, differentiable operations with explicit backward
//! passes, a finite-difference checker, and binary tensor encoding.

pub mod grad_check;
pub mod ops;
pub mod serialize;
mod tensor;

pub use grad_check::{grad_check, GradCheck, GradCheckReport};
pub use ops::{matmul, matmul_backward, softmax, softmax_backward};
pub use tensor::Tensor;

/// A parameter value together with the gradient of a scalar objective with
/// respect to it. Both share one shape.
#[derive(Clone, Debug)]
pub struct GradPair {
    pub value: Tensor,
    pub gradient: Tensor,
}

impl GradPair {
    pub fn new(value: Tensor, gradient: Tensor) -> crate::Result<Self> {
        if value.shape() != gradient.shape() {
            return Err(crate::Error::Dimension(format!(
                "gradient shape {:?} differs from parameter shape {:?}",
                gradient.shape(),
                value.shape()
            )));
        }
        Ok(Self { value, gradient })
    }
}
