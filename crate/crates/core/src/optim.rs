//! Adam optimizer over tensor parameter handles.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<S: Scalar> {
    params: Vec<Tensor<S>>,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step_count: u32,
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: Vec<Tensor<S>>, lr: f64) -> Self {
        Self::with_config(params, AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }

    pub fn with_config(params: Vec<Tensor<S>>, cfg: AdamConfig) -> Self {
        let m = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
        let v = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
        Adam {
            params,
            m,
            v,
            step_count: 0,
            lr: S::from_f64(cfg.lr),
            beta1: S::from_f64(cfg.beta1),
            beta2: S::from_f64(cfg.beta2),
            eps: S::from_f64(cfg.eps),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Apply one update from the accumulated gradients. Parameters whose
    /// gradient is unpopulated are left untouched.
    pub fn step(&mut self) {
        self.step_count += 1;
        let one = S::one();
        let bc1 = one - self.beta1.powi(self.step_count as i32);
        let bc2 = one - self.beta2.powi(self.step_count as i32);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update_data(|data| {
                for j in 0..data.len() {
                    m[j] = self.beta1 * m[j] + (one - self.beta1) * g[j];
                    v[j] = self.beta2 * v[j] + (one - self.beta2) * g[j] * g[j];
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    data[j] = data[j] - self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            });
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}
