//! Per-speaker adapter: a residual down/up projection pair inserted after the
//! last encoder layer and trained while the backbone stays frozen.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{join_path, HasParams};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    fn apply<S: Scalar>(self, x: &Tensor<S>) -> Tensor<S> {
        match self {
            Activation::Gelu => tensor::gelu(x),
            Activation::Relu => tensor::relu(x),
        }
    }
}

pub struct AdapterLayer<S: Scalar> {
    down: Linear<S>,
    up: Linear<S>,
    activation: Activation,
    dim: usize,
    inner_dim: usize,
}

impl<S: Scalar> AdapterLayer<S> {
    /// Down projection gets a Glorot init; the up projection starts at zero so
    /// a fresh adapter is exactly the identity map.
    pub fn new(d: usize, d_inner: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        AdapterLayer {
            down: Linear::init(d, d_inner, true, rng),
            up: Linear::zeros(d_inner, d, true),
            activation,
            dim: d,
            inner_dim: d_inner,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inner_dim(&self) -> usize {
        self.inner_dim
    }

    /// `Y = y + up(act(down(y)))`.
    pub fn forward(&self, y_o: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = y_o.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "adapter_forward",
                lhs: shape,
                rhs: vec![self.dim],
            });
        }
        let hidden = self.activation.apply(&self.down.apply(y_o)?);
        let delta = self.up.apply(&hidden)?;
        tensor::add(y_o, &delta)
    }

    /// Trainable scalars: `d·d_inner + d_inner + d_inner·d + d`.
    pub fn param_count(&self) -> usize {
        adapter_param_count(self.dim, self.inner_dim)
    }

    /// Deep copy with independent storage; training the copy leaves the
    /// source untouched.
    pub fn deep_clone(&self) -> Self {
        AdapterLayer {
            down: self.down.deep_clone(),
            up: self.up.deep_clone(),
            activation: self.activation,
            dim: self.dim,
            inner_dim: self.inner_dim,
        }
    }

    /// Second handle onto the same parameter storage (for read-only sharing
    /// of frozen adapters across stages).
    pub fn share(&self) -> Self {
        AdapterLayer {
            down: self.down.share(),
            up: self.up.share(),
            activation: self.activation,
            dim: self.dim,
            inner_dim: self.inner_dim,
        }
    }
}

impl<S: Scalar> HasParams<S> for AdapterLayer<S> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.down.collect_params(&join_path(prefix, "down"), out);
        self.up.collect_params(&join_path(prefix, "up"), out);
    }
}

pub fn adapter_param_count(d: usize, d_inner: usize) -> usize {
    d * d_inner + d_inner + d_inner * d + d
}

/// Deep copy of an adapter (spec-facing free function).
pub fn clone_adapter<S: Scalar>(src: &AdapterLayer<S>) -> AdapterLayer<S> {
    src.deep_clone()
}

/// Stack the outputs of several adapters on a shared input along a new
/// leading axis: `[N×T×d]` in input order.
pub fn stack_adapter_outputs<S: Scalar>(
    adapters: &[&AdapterLayer<S>],
    y_o: &Tensor<S>,
) -> Result<Tensor<S>> {
    if adapters.is_empty() {
        return Err(Error::Config("stack_adapter_outputs of zero adapters".into()));
    }
    let d = adapters[0].dim;
    for a in adapters {
        if a.dim != d {
            return Err(Error::ShapeMismatch {
                op: "stack_adapter_outputs",
                lhs: vec![a.dim],
                rhs: vec![d],
            });
        }
    }
    let outputs = adapters
        .iter()
        .map(|a| a.forward(y_o))
        .collect::<Result<Vec<_>>>()?;
    tensor::stack0(&outputs)
}
