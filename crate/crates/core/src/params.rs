//! Named-parameter collection.
//!
//! Every layer exposes its parameters as `(path, tensor)` pairs with
//! `/`-separated namespaces (`encoder/layer0/attn/head1/wq`,
//! `adapter/spk03/up_w`, `fusion/value/householder/couple07/v1`). Counting,
//! checkpointing, freezing and optimizer construction all work off this view.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A layer or model that can enumerate its parameters by path.
pub trait HasParams<S: Scalar> {
    /// Append `(path, tensor)` pairs under `prefix`.
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>);

    fn named_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    /// Handles of all parameters marked trainable.
    fn trainable_params(&self) -> Vec<Tensor<S>> {
        self.named_params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t)
            .collect()
    }

    /// Total number of trainable scalars.
    fn trainable_scalar_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Mark every parameter trainable or frozen.
    fn set_trainable(&self, trainable: bool) {
        for (_, t) in self.named_params() {
            t.set_requires_grad(trainable);
        }
    }

    /// Clear gradient accumulators on every parameter.
    fn zero_grads(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }
}

pub fn join_path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}
