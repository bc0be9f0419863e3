//! Miniature transformer encoder with two task heads.
//!
//! The backbone (embedding, self-attention layers, feed-forward blocks and
//! both classification heads) is pretrained on clean data and then frozen;
//! an adapter stage slotted after the last encoder layer carries all further
//! adaptation. The two heads produce the pair of task losses combined by
//! [`combine_losses`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::AdapterLayer;
use crate::error::{Error, Result};
use crate::fusion::FusionLayer;
use crate::layers::{LayerNorm, Linear};
use crate::params::{join_path, HasParams};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_in: usize,
    pub vocab_out: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_in", self.vocab_in),
            ("vocab_out", self.vocab_out),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("encoder {name} must be positive")));
            }
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

struct AttentionHead<S: Scalar> {
    wq: Linear<S>,
    wk: Linear<S>,
    wv: Linear<S>,
    wo: Linear<S>,
}

impl<S: Scalar> HasParams<S> for AttentionHead<S> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.wq.collect_params(&join_path(prefix, "wq"), out);
        self.wk.collect_params(&join_path(prefix, "wk"), out);
        self.wv.collect_params(&join_path(prefix, "wv"), out);
        self.wo.collect_params(&join_path(prefix, "wo"), out);
    }
}

struct EncoderLayer<S: Scalar> {
    heads: Vec<AttentionHead<S>>,
    ln1: LayerNorm<S>,
    ffn1: Linear<S>,
    ffn2: Linear<S>,
    ln2: LayerNorm<S>,
    head_dim: usize,
}

impl<S: Scalar> EncoderLayer<S> {
    fn new(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        let dh = d / cfg.num_heads;
        let heads = (0..cfg.num_heads)
            .map(|_| AttentionHead {
                wq: Linear::init(d, dh, false, rng),
                wk: Linear::init(d, dh, false, rng),
                wv: Linear::init(d, dh, false, rng),
                wo: Linear::init(dh, d, false, rng),
            })
            .collect();
        EncoderLayer {
            heads,
            ln1: LayerNorm::new(d),
            ffn1: Linear::init(d, cfg.ffn_dim, true, rng),
            ffn2: Linear::init(cfg.ffn_dim, d, true, rng),
            ln2: LayerNorm::new(d),
            head_dim: dh,
        }
    }

    fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        // post-LN transformer block; heads are summed through their own
        // output projections, which equals the usual concat-then-project
        let scale = S::one() / S::from_f64((self.head_dim as f64).sqrt());
        let mut attn: Option<Tensor<S>> = None;
        for h in &self.heads {
            let q = h.wq.apply(x)?;
            let k = h.wk.apply(x)?;
            let v = h.wv.apply(x)?;
            let scores = tensor::scale(&tensor::matmul(&q, &tensor::transpose2(&k)?)?, scale);
            let weights = tensor::softmax(&scores, 1)?;
            let mixed = tensor::matmul(&weights, &v)?;
            let projected = h.wo.apply(&mixed)?;
            attn = Some(match attn {
                Some(acc) => tensor::add(&acc, &projected)?,
                None => projected,
            });
        }
        let x = self.ln1.apply(&tensor::add(x, &attn.expect("num_heads >= 1"))?)?;
        let ff = self.ffn2.apply(&tensor::relu(&self.ffn1.apply(&x)?))?;
        self.ln2.apply(&tensor::add(&x, &ff)?)
    }
}

impl<S: Scalar> HasParams<S> for EncoderLayer<S> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        for (h, head) in self.heads.iter().enumerate() {
            head.collect_params(&join_path(prefix, &format!("attn/head{h}")), out);
        }
        self.ln1.collect_params(&join_path(prefix, "ln1"), out);
        self.ffn1.collect_params(&join_path(prefix, "ffn1"), out);
        self.ffn2.collect_params(&join_path(prefix, "ffn2"), out);
        self.ln2.collect_params(&join_path(prefix, "ln2"), out);
    }
}

/// What sits after the last encoder layer.
pub enum AdapterStage<S: Scalar> {
    None,
    Single {
        name: String,
        adapter: AdapterLayer<S>,
    },
    /// Frozen per-speaker adapters combined by a trainable fusion layer.
    Fusion {
        adapters: Vec<(String, AdapterLayer<S>)>,
        fusion: FusionLayer<S>,
    },
    /// Uniform average of the adapter outputs, no trainable combiner.
    Average {
        adapters: Vec<(String, AdapterLayer<S>)>,
    },
}

pub struct EncoderModel<S: Scalar> {
    cfg: EncoderConfig,
    embedding: Tensor<S>,
    layers: Vec<EncoderLayer<S>>,
    head_primary: Linear<S>,
    head_aux: Linear<S>,
    stage: AdapterStage<S>,
}

impl<S: Scalar> EncoderModel<S> {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.model_dim;
        let embedding = Tensor::from_vec(
            vec![cfg.vocab_in, d],
            crate::layers::sample_normal(cfg.vocab_in * d, 0.5, &mut rng),
        )
        .expect("sized data")
        .tracked();
        let layers = (0..cfg.num_layers)
            .map(|_| EncoderLayer::new(&cfg, &mut rng))
            .collect();
        let head_primary = Linear::init(d, cfg.vocab_out, true, &mut rng);
        let head_aux = Linear::init(d, cfg.vocab_out, true, &mut rng);
        Ok(EncoderModel {
            cfg,
            embedding,
            layers,
            head_primary,
            head_aux,
            stage: AdapterStage::None,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn stage(&self) -> &AdapterStage<S> {
        &self.stage
    }

    pub fn stage_mut(&mut self) -> &mut AdapterStage<S> {
        &mut self.stage
    }

    pub fn set_stage(&mut self, stage: AdapterStage<S>) {
        self.stage = stage;
    }

    /// Take the stage out, leaving `None` in place.
    pub fn take_stage(&mut self) -> AdapterStage<S> {
        std::mem::replace(&mut self.stage, AdapterStage::None)
    }

    /// Backbone map `Y_O = M_O(X)`: embedding, positional encoding and the
    /// encoder layers. The adapter stage is not applied.
    pub fn encode(&self, tokens: &[usize]) -> Result<Tensor<S>> {
        let d = self.cfg.model_dim;
        let embedded = tensor::embedding(&self.embedding, tokens)?;
        if tokens.is_empty() {
            return Ok(embedded); // [0×d]
        }
        let pe = sinusoidal_positions::<S>(tokens.len(), d);
        let mut x = tensor::add(&embedded, &pe)?;
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// Apply the adapter stage to a backbone output.
    pub fn apply_stage(&self, y_o: &Tensor<S>) -> Result<Tensor<S>> {
        match &self.stage {
            AdapterStage::None => Ok(y_o.clone()),
            AdapterStage::Single { adapter, .. } => adapter.forward(y_o),
            AdapterStage::Fusion { adapters, fusion } => {
                let refs: Vec<&AdapterLayer<S>> = adapters.iter().map(|(_, a)| a).collect();
                let stacked = crate::adapter::stack_adapter_outputs(&refs, y_o)?;
                fusion.forward(y_o, &stacked)
            }
            AdapterStage::Average { adapters } => {
                let refs: Vec<&AdapterLayer<S>> = adapters.iter().map(|(_, a)| a).collect();
                let stacked = crate::adapter::stack_adapter_outputs(&refs, y_o)?;
                let n = refs.len();
                let mut acc: Option<Tensor<S>> = None;
                for i in 0..n {
                    let s = tensor::slice0(&stacked, i)?;
                    acc = Some(match acc {
                        Some(a) => tensor::add(&a, &s)?,
                        None => s,
                    });
                }
                Ok(tensor::scale(
                    &acc.expect("nonempty adapter list"),
                    S::one() / S::from_f64(n as f64),
                ))
            }
        }
    }

    /// Encoder output including the adapter stage.
    pub fn hidden(&self, tokens: &[usize]) -> Result<Tensor<S>> {
        let y_o = self.encode(tokens)?;
        self.apply_stage(&y_o)
    }

    /// Primary and auxiliary head logits over an encoder output.
    pub fn head_logits(&self, hidden: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        Ok((
            self.head_primary.apply(hidden)?,
            self.head_aux.apply(hidden)?,
        ))
    }

    /// Mean cross-entropy of both heads over a batch of `(tokens, labels)`.
    pub fn task_losses(&self, batch: &[(Vec<usize>, Vec<usize>)]) -> Result<(Tensor<S>, Tensor<S>)> {
        self.task_losses_on_hidden(
            &batch
                .iter()
                .map(|(tokens, labels)| Ok((self.hidden(tokens)?, labels.clone())))
                .collect::<Result<Vec<_>>>()?,
        )
    }

    /// Same as [`task_losses`](Self::task_losses) but over precomputed hidden
    /// states (training loops cache these once the backbone is frozen).
    pub fn task_losses_on_hidden(
        &self,
        batch: &[(Tensor<S>, Vec<usize>)],
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        if batch.is_empty() {
            return Err(Error::Data("task_losses on an empty batch".into()));
        }
        let mut primary: Option<Tensor<S>> = None;
        let mut aux: Option<Tensor<S>> = None;
        for (hidden, labels) in batch {
            if hidden.shape()[0] != labels.len() {
                return Err(Error::Data(format!(
                    "utterance has {} positions but {} labels",
                    hidden.shape()[0],
                    labels.len()
                )));
            }
            let (lp, la) = self.head_logits(hidden)?;
            let ce_p = tensor::cross_entropy(&lp, labels)?;
            let ce_a = tensor::cross_entropy(&la, labels)?;
            primary = Some(match primary {
                Some(acc) => tensor::add(&acc, &ce_p)?,
                None => ce_p,
            });
            aux = Some(match aux {
                Some(acc) => tensor::add(&acc, &ce_a)?,
                None => ce_a,
            });
        }
        let inv = S::one() / S::from_f64(batch.len() as f64);
        Ok((
            tensor::scale(&primary.expect("nonempty"), inv),
            tensor::scale(&aux.expect("nonempty"), inv),
        ))
    }

    /// Greedy label decode with the primary head.
    pub fn predict(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        let hidden = self.hidden(tokens)?;
        if tokens.is_empty() {
            return Ok(vec![]);
        }
        let (lp, _) = self.head_logits(&hidden)?;
        Ok(tensor::argmax_rows(&lp))
    }

    /// Decode from a precomputed hidden state.
    pub fn predict_on_hidden(&self, hidden: &Tensor<S>) -> Result<Vec<usize>> {
        if hidden.shape()[0] == 0 {
            return Ok(vec![]);
        }
        let (lp, _) = self.head_logits(hidden)?;
        Ok(tensor::argmax_rows(&lp))
    }

    /// Backbone parameters: embedding, encoder layers and both task heads.
    pub fn backbone_named_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        out.push(("encoder/embedding".to_string(), self.embedding.clone()));
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect_params(&format!("encoder/layer{i}"), &mut out);
        }
        self.head_primary.collect_params("encoder/head_primary", &mut out);
        self.head_aux.collect_params("encoder/head_aux", &mut out);
        out
    }

    pub fn set_backbone_trainable(&self, trainable: bool) {
        for (_, t) in self.backbone_named_params() {
            t.set_requires_grad(trainable);
        }
    }

    pub fn freeze_backbone(&self) {
        self.set_backbone_trainable(false);
    }
}

impl<S: Scalar> HasParams<S> for EncoderModel<S> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        for (name, t) in self.backbone_named_params() {
            out.push((join_path(prefix, &name), t));
        }
        match &self.stage {
            AdapterStage::None => {}
            AdapterStage::Single { name, adapter } => {
                adapter.collect_params(&join_path(prefix, &format!("adapter/{name}")), out);
            }
            AdapterStage::Fusion { adapters, fusion } => {
                for (name, a) in adapters {
                    a.collect_params(&join_path(prefix, &format!("adapter/{name}")), out);
                }
                fusion.collect_params(&join_path(prefix, "fusion"), out);
            }
            AdapterStage::Average { adapters } => {
                for (name, a) in adapters {
                    a.collect_params(&join_path(prefix, &format!("adapter/{name}")), out);
                }
            }
        }
    }
}

/// Sinusoidal position encoding, `[T×d]` constant.
pub fn sinusoidal_positions<S: Scalar>(t_len: usize, d: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); t_len * d];
    for t in 0..t_len {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            data[t * d + j] = S::from_f64(v);
        }
    }
    Tensor::leaf(vec![t_len, d], data)
}

/// `(1−λ1)·l_trans + λ1·l_ctc + λ2·l_reg`, the hybrid training loss.
pub fn combine_losses<S: Scalar>(
    l_trans: &Tensor<S>,
    l_ctc: &Tensor<S>,
    l_reg: &Tensor<S>,
    lambda1: f64,
    lambda2: f64,
) -> Result<Tensor<S>> {
    if !(0.0..=1.0).contains(&lambda1) {
        return Err(Error::Config(format!("lambda1 {lambda1} outside [0, 1]")));
    }
    if lambda2 < 0.0 {
        return Err(Error::Config(format!("lambda2 {lambda2} must be nonnegative")));
    }
    for (name, t) in [("l_trans", l_trans), ("l_ctc", l_ctc), ("l_reg", l_reg)] {
        if t.numel() != 1 {
            return Err(Error::Rank {
                op: "combine_losses",
                expected: 0,
                shape: t.shape(),
            });
        }
        let _ = name;
    }
    let a = tensor::scale(l_trans, S::from_f64(1.0 - lambda1));
    let b = tensor::scale(l_ctc, S::from_f64(lambda1));
    let c = tensor::scale(l_reg, S::from_f64(lambda2));
    tensor::add(&tensor::add(&a, &b)?, &c)
}
