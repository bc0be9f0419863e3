//! Small parameter bundles shared by the encoder and fusion layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{join_path, HasParams};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Affine layer norm over the last axis.
pub struct LayerNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub eps: S,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<S: Scalar> LayerNorm<S> {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Tensor::ones(&[d]).tracked(),
            beta: Tensor::zeros(&[d]).tracked(),
            eps: S::from_f64(LAYER_NORM_EPS),
        }
    }

    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        tensor::layer_norm(x, &self.gamma, &self.beta, self.eps)
    }

    pub fn param_count(d: usize) -> usize {
        2 * d
    }
}

impl<S: Scalar> HasParams<S> for LayerNorm<S> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((join_path(prefix, "gamma"), self.gamma.clone()));
        out.push((join_path(prefix, "beta"), self.beta.clone()));
    }
}

/// Dense projection `x·W (+ b)`.
pub struct Linear<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    /// Glorot-scaled normal init.
    pub fn init(fan_in: usize, fan_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Tensor::from_vec(
            vec![fan_in, fan_out],
            sample_normal(fan_in * fan_out, std, rng),
        )
        .expect("sized data")
        .tracked();
        let b = bias.then(|| Tensor::zeros(&[fan_out]).tracked());
        Linear { w, b }
    }

    /// All-zero weights (and bias); useful for residual-identity starts.
    pub fn zeros(fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = Tensor::zeros(&[fan_in, fan_out]).tracked();
        let b = bias.then(|| Tensor::zeros(&[fan_out]).tracked());
        Linear { w, b }
    }

    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let y = tensor::matmul(x, &self.w)?;
        match &self.b {
            Some(b) => tensor::add_bias(&y, b),
            None => Ok(y),
        }
    }

    pub fn deep_clone(&self) -> Self {
        Linear {
            w: self.w.deep_clone(),
            b: self.b.as_ref().map(Tensor::deep_clone),
        }
    }

    /// Second handle onto the same parameter storage.
    pub fn share(&self) -> Self {
        Linear {
            w: self.w.clone(),
            b: self.b.clone(),
        }
    }
}

impl<S: Scalar> HasParams<S> for Linear<S> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((join_path(prefix, "w"), self.w.clone()));
        if let Some(b) = &self.b {
            out.push((join_path(prefix, "b"), b.clone()));
        }
    }
}

/// Seeded standard-normal draws, scaled by `std`. Sampling happens in `f64`
/// so a given seed produces the same stream regardless of `S`.
pub fn sample_normal<S: Scalar>(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<S> {
    (0..n)
        .map(|_| S::from_f64(rng.sample::<f64, _>(rand_distr::StandardNormal) * std))
        .collect()
}
