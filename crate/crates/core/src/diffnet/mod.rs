//! A deliberately small differentiable-network toolkit.
//!
//! Networks are flat lists of layers whose caches live inside the layers:
//! [`Network::forward`] records what [`Network::backward`] needs, and
//! [`Network::infer`] is the cache-free evaluation path used by frozen modules.
//! Everything is `f64`.

mod checkpoint;
mod gradcheck;
mod layers;
mod network;
mod optim;

pub use checkpoint::{decode_params, encode_params, load_params, params_digest, CheckpointManifest};
pub use gradcheck::{grad_check, GradCheckReport, Objective, GRAD_CHECK_FLOOR};
pub use layers::{Activation, ActivationKind, Dropout, Linear, TokenAttention};
pub use network::{Layer, LayerSpec, Network};
pub use optim::{AdamW, AdamWConfig};

use ndarray::Array2;

/// Generator used for every stochastic draw in the engine.
pub type Rng = rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named trainable matrix with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    frozen: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            grad,
            frozen: false,
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Param::new(name, Array2::zeros((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Replaces the value, resizing the gradient to match.
    pub fn set_value(&mut self, value: Array2<f64>) {
        self.grad = Array2::zeros(value.raw_dim());
        self.value = value;
    }
}

pub(crate) fn ensure_finite(x: &Array2<f64>, context: &str) -> crate::Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(crate::Error::NonFiniteInput(context.to_string()))
    }
}
