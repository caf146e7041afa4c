//! Minimal neural substrate: tensors, dense/conv/batchnorm/dropout/relu
//! layers with reverse-mode gradients, the Adam optimizer, and the step
//! learning-rate schedule. Everything is f64; training is deterministic
//! under a fixed seed.

mod adam;
pub mod check;
mod layers;

pub use adam::{adam_step, lr_schedule, AdamConfig, AdamState};
pub use layers::{
    global_avg_pool, global_avg_pool_backward, BatchNorm, Conv2d, Conv3d, Dense, Dropout, Relu,
};

use crate::error::{Error, Result};

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite values in {what}")));
        }
        Ok(())
    }
}

/// A trainable parameter with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Param {
            value: Tensor::zeros(shape),
            grad: Tensor::zeros(shape),
        }
    }

    /// Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl rand::Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut p = Param::zeros(shape);
        for v in &mut p.value.data {
            *v = rng.gen_range(-bound..bound);
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.data.fill(0.0);
    }
}

/// Mutable access to named parameters, used by the optimizer, the
/// checkpoint writer, and gradient checks. Names must be stable.
pub trait Parameterized {
    fn named_params(&mut self) -> Vec<(String, &mut Param)>;

    fn zero_grads(&mut self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    fn param_count(&mut self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }
}

/// Train/eval switch for batchnorm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
