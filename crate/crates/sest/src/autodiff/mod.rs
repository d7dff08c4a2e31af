//! Reverse-mode automatic differentiation over dense 64-bit-float tensors.
//!
//! A [`Tape`] records the forward computation; [`Tape::backward`] fills
//! gradients for every recorded node reachable from a scalar loss. Trainable
//! parameters live in a [`ParamStore`] outside any tape and are leased in as
//! leaf nodes per forward pass; the tape is rebuilt per pass, no graph
//! caching.

mod store;
mod tape;

pub use store::{grad_check, grad_check_detailed, AdamConfig, GradCheckReport, Param, ParamStore};
pub use tape::{Shape, Tape, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities are clamped here before logs so a saturated softmax cannot
/// produce an infinite loss.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {message}")]
    Argument { op: &'static str, message: String },
    #[error("loss must be a scalar, found shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("optimizer step requested before any gradients were populated")]
    GradsMissing,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Eval(String),
}

/// Shape-tagged row-major array of 64-bit floats. Rank 1 (vectors, with
/// scalars as length-1 vectors) and rank 2 (matrices) are used throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn vector(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len()], values }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], values: vec![v] }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "matrix data length mismatch");
        Tensor { shape: vec![rows, cols], values }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), values: vec![0.0; n] }
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

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Validate that the declared shape matches the stored data; used after
    /// deserializing checkpoints.
    pub fn check(&self) -> Result<(), AutodiffError> {
        let n: usize = self.shape.iter().product();
        if self.shape.is_empty() || self.shape.contains(&0) || n != self.values.len() {
            return Err(AutodiffError::Argument {
                op: "tensor",
                message: format!(
                    "shape {:?} inconsistent with {} values",
                    self.shape,
                    self.values.len()
                ),
            });
        }
        Ok(())
    }
}
