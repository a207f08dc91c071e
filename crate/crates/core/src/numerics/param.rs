use serde::{Deserialize, Serialize};

use super::Tensor;

/// How the optimizer treats a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    /// Batch-norm scale and shift.
    NormAffine,
    /// Multiplicative feedback gates.
    Gate,
}

impl ParamRole {
    /// Weight decay skips norm affine terms and gates.
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Weight)
    }
}

/// A learnable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    pub role: ParamRole,
}

impl Parameter {
    pub fn new(value: Tensor, role: ParamRole) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable: true,
            role,
        }
    }

    pub fn weight(value: Tensor) -> Self {
        Self::new(value, ParamRole::Weight)
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.grad.len());
        for (g, d) in self.grad.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }
}
