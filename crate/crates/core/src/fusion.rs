//! Adapter-fusion layer: attention over the stacked adapter outputs with
//! layer-normed key/query projections, a pluggable value transformation and a
//! residual from the fusion input.
//!
//! Variants (all reachable through [`FusionConfig`]):
//!
//! - full:            `Y_F = Σ_n α_n·(Y_a_n·W) + R`
//! - attention off:   `Y_F = (1/N)·Σ_n Y_a_n·W + R`
//! - value off:       `Y_F = Σ_n α_n·Y_a_n + R`
//!
//! where `α` is the per-time-step softmax over the `N` adapters of
//! `LN(Q(Y_O))·LN(K(Y_a_n))ᵀ` and `R` is the fusion input `Y_O`. The value
//! matrix `W` is either a dense near-identity-initialized matrix or a
//! Householder product (optionally scaled), see [`crate::householder`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::householder::{self, HouseholderStack};
use crate::layers::{LayerNorm, Linear};
use crate::params::{join_path, HasParams};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

pub const DENSE_W_OFF_DIAGONAL_INIT: f64 = 1e-6;

/// Which value transformation the fusion layer applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Dense,
    Householder { couples: usize, scaled: bool },
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub enabled: bool,
    pub d_att: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub attention: AttentionConfig,
    pub value: ValueKind,
    pub n_adapters: usize,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.attention.enabled && self.value == ValueKind::Absent {
            return Err(Error::Config(
                "fusion layer needs attention or a value transform".into(),
            ));
        }
        if self.attention.enabled && self.attention.d_att == 0 {
            return Err(Error::Config("attention dimension must be positive".into()));
        }
        if self.n_adapters == 0 {
            return Err(Error::Config("fusion layer needs at least one adapter".into()));
        }
        if let ValueKind::Householder { couples, .. } = self.value {
            if couples == 0 {
                return Err(Error::Config("householder value needs C >= 1 couples".into()));
            }
        }
        Ok(())
    }
}

/// The materializable value parameter of the fusion layer.
pub enum ValueParam<S: Scalar> {
    Dense { w: Tensor<S> },
    Householder(HouseholderStack<S>),
    Absent,
}

impl<S: Scalar> ValueParam<S> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ValueParam::Dense { .. } => "dense",
            ValueParam::Householder(_) => "householder",
            ValueParam::Absent => "absent",
        }
    }
}

pub struct FusionLayer<S: Scalar> {
    cfg: FusionConfig,
    dim: usize,
    query: Option<Linear<S>>,
    key: Option<Linear<S>>,
    ln_q: Option<LayerNorm<S>>,
    ln_k: Option<LayerNorm<S>>,
    value: ValueParam<S>,
}

/// Dense value matrix at its prescribed initialization: ones on the diagonal,
/// `1e-6` everywhere else.
pub fn init_dense_w<S: Scalar>(d: usize) -> ValueParam<S> {
    let off = S::from_f64(DENSE_W_OFF_DIAGONAL_INIT);
    let mut data = vec![off; d * d];
    for i in 0..d {
        data[i * d + i] = S::one();
    }
    ValueParam::Dense {
        w: Tensor::from_vec(vec![d, d], data).expect("sized data").tracked(),
    }
}

impl<S: Scalar> FusionLayer<S> {
    pub fn new(cfg: FusionConfig, d: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(cfg, d, &mut rng)
    }

    pub fn with_rng(cfg: FusionConfig, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (query, key, ln_q, ln_k) = if cfg.attention.enabled {
            (
                Some(Linear::init(d, cfg.attention.d_att, false, rng)),
                Some(Linear::init(d, cfg.attention.d_att, false, rng)),
                Some(LayerNorm::new(cfg.attention.d_att)),
                Some(LayerNorm::new(cfg.attention.d_att)),
            )
        } else {
            (None, None, None, None)
        };
        let value = match cfg.value {
            ValueKind::Dense => init_dense_w(d),
            ValueKind::Householder { couples, scaled } => ValueParam::Householder(
                householder::init_stack_with_rng(couples, d, scaled, rng)?,
            ),
            ValueKind::Absent => ValueParam::Absent,
        };
        Ok(FusionLayer {
            cfg,
            dim: d,
            query,
            key,
            ln_q,
            ln_k,
            value,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self) -> &ValueParam<S> {
        &self.value
    }

    /// Replace the value parameter (SVD-ablation experiments swap in a fixed
    /// `W_UV` or `W_Σ` matrix here).
    pub fn set_value(&mut self, value: ValueParam<S>) {
        self.value = value;
    }

    fn check_io_shapes(&self, y_o: &Tensor<S>, y_a: &Tensor<S>) -> Result<(usize, usize)> {
        let so = y_o.shape();
        let sa = y_a.shape();
        if so.len() != 2 || so[1] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "fusion_forward",
                lhs: so,
                rhs: vec![self.dim],
            });
        }
        if sa.len() != 3 || sa[0] != self.cfg.n_adapters || sa[1] != so[0] || sa[2] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "fusion_forward",
                lhs: sa,
                rhs: vec![self.cfg.n_adapters, so[0], self.dim],
            });
        }
        Ok((so[0], sa[0]))
    }

    /// Per-time-step attention over the `N` adapters:
    /// `α[t,n] = softmax_n( LN(Q(y_o))[t] · LN(K(y_a_n))[t] )`, shape `[T×N]`.
    pub fn attention_scores(&self, y_o: &Tensor<S>, y_a: &Tensor<S>) -> Result<Tensor<S>> {
        if !self.cfg.attention.enabled {
            return Err(Error::Usage(
                "attention_scores on a fusion layer with attention disabled".into(),
            ));
        }
        let (_t, n) = self.check_io_shapes(y_o, y_a)?;
        let query = self.query.as_ref().expect("attention enabled");
        let key = self.key.as_ref().expect("attention enabled");
        let ln_q = self.ln_q.as_ref().expect("attention enabled");
        let ln_k = self.ln_k.as_ref().expect("attention enabled");

        let q = ln_q.apply(&query.apply(y_o)?)?;
        let mut per_adapter = Vec::with_capacity(n);
        for i in 0..n {
            let k = ln_k.apply(&key.apply(&tensor::slice0(y_a, i)?)?)?;
            per_adapter.push(tensor::rowwise_dot(&q, &k)?);
        }
        let logits = tensor::transpose2(&tensor::stack0(&per_adapter)?)?; // [T×N]
        tensor::softmax(&logits, 1)
    }

    /// Apply the configured value transform to a `[T×d]` tensor.
    fn apply_value(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        match &self.value {
            ValueParam::Dense { w } => tensor::matmul(x, w),
            ValueParam::Householder(h) => householder::stack_apply(h, x),
            ValueParam::Absent => Ok(x.clone()),
        }
    }

    /// Full fusion forward; `y_a` is the `[N×T×d]` stack of adapter outputs
    /// and the residual is the fusion input `y_o`.
    pub fn forward(&self, y_o: &Tensor<S>, y_a: &Tensor<S>) -> Result<Tensor<S>> {
        let (_t, n) = self.check_io_shapes(y_o, y_a)?;

        let combined = if self.cfg.attention.enabled {
            let alpha = self.attention_scores(y_o, y_a)?; // [T×N]
            let alpha_t = tensor::transpose2(&alpha)?; // [N×T]
            let mut acc: Option<Tensor<S>> = None;
            for i in 0..n {
                let slice = tensor::slice0(y_a, i)?;
                let weights = tensor::slice0(&alpha_t, i)?;
                let weighted = tensor::scale_rows(&slice, &weights)?;
                acc = Some(match acc {
                    Some(a) => tensor::add(&a, &weighted)?,
                    None => weighted,
                });
            }
            acc.expect("n >= 1")
        } else {
            let mut acc: Option<Tensor<S>> = None;
            for i in 0..n {
                let slice = tensor::slice0(y_a, i)?;
                acc = Some(match acc {
                    Some(a) => tensor::add(&a, &slice)?,
                    None => slice,
                });
            }
            tensor::scale(&acc.expect("n >= 1"), S::one() / S::from_f64(n as f64))
        };

        let transformed = self.apply_value(&combined)?;
        tensor::add(&transformed, y_o)
    }

    /// `‖I − W_eff‖²` where `W_eff` is the materialized value matrix.
    pub fn reg_loss(&self) -> Result<Tensor<S>> {
        reg_loss(&self.value, self.dim)
    }

    pub fn param_count(&self) -> usize {
        count_fusion_parameters(&self.cfg, self.dim)
    }
}

impl<S: Scalar> HasParams<S> for FusionLayer<S> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        if let Some(q) = &self.query {
            q.collect_params(&join_path(prefix, "query"), out);
        }
        if let Some(k) = &self.key {
            k.collect_params(&join_path(prefix, "key"), out);
        }
        if let Some(ln) = &self.ln_q {
            ln.collect_params(&join_path(prefix, "ln_q"), out);
        }
        if let Some(ln) = &self.ln_k {
            ln.collect_params(&join_path(prefix, "ln_k"), out);
        }
        match &self.value {
            ValueParam::Dense { w } => out.push((join_path(prefix, "value/dense_w"), w.clone())),
            ValueParam::Householder(h) => {
                h.collect_params(&join_path(prefix, "value/householder"), out)
            }
            ValueParam::Absent => {}
        }
    }
}

/// Squared Frobenius distance of the materialized value matrix from identity
/// (the regularizer toward stable adapter outputs). Differentiable.
pub fn reg_loss<S: Scalar>(value: &ValueParam<S>, d: usize) -> Result<Tensor<S>> {
    let w_eff = match value {
        ValueParam::Dense { w } => w.clone(),
        ValueParam::Householder(h) => householder::materialize(h)?,
        ValueParam::Absent => {
            return Err(Error::Usage("reg_loss on an absent value parameter".into()))
        }
    };
    tensor::squared_frobenius_distance(&Tensor::eye(d), &w_eff)
}

/// Exact trainable-parameter count of a fusion configuration at width `d`:
/// attention contributes two bias-free `d×d_att` projections plus two affine
/// layer norms over `d_att`; the value contributes `d²` (dense) or `2·C·d`
/// (+`d` when scaled; Householder).
pub fn count_fusion_parameters(cfg: &FusionConfig, d: usize) -> usize {
    let mut count = 0;
    if cfg.attention.enabled {
        count += 2 * d * cfg.attention.d_att + 2 * (2 * cfg.attention.d_att);
    }
    count += match cfg.value {
        ValueKind::Dense => d * d,
        ValueKind::Householder { couples, scaled } => {
            householder::stack_param_count(couples, d, scaled)
        }
        ValueKind::Absent => 0,
    };
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(att: Option<usize>, value: ValueKind, n: usize) -> FusionConfig {
        FusionConfig {
            attention: AttentionConfig {
                enabled: att.is_some(),
                d_att: att.unwrap_or(0),
            },
            value,
            n_adapters: n,
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_rejects_fully_ablated_layer() {
        assert!(cfg(None, ValueKind::Absent, 3).validate().is_err());
        assert!(cfg(Some(8), ValueKind::Absent, 3).validate().is_ok());
        assert!(cfg(None, ValueKind::Dense, 3).validate().is_ok());
    }

    #[test]
    fn dense_w_initialization_is_exact() {
        let ValueParam::Dense { w } = init_dense_w::<f64>(3) else {
            panic!()
        };
        let data = w.data();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 1e-6 };
                assert_eq!(data[i * 3 + j], want);
            }
        }
        // ‖I − W‖² at d=3 is six squared off-diagonals
        let ValueParam::Dense { w } = init_dense_w::<f64>(3) else {
            panic!()
        };
        let r = reg_loss(&ValueParam::Dense { w }, 3).unwrap().item();
        assert!((r - 6e-12).abs() < 1e-24);
    }

    #[test]
    fn dense_w_init_reg_loss_at_256() {
        let v = init_dense_w::<f64>(256);
        let r = reg_loss(&v, 256).unwrap().item();
        let expect = (256.0 * 256.0 - 256.0) * 1e-12;
        assert!((r - expect).abs() / expect < 1e-9, "reg {r} vs {expect}");
    }

    #[test]
    fn dense_w_of_one_is_trivial() {
        let ValueParam::Dense { w } = init_dense_w::<f64>(1) else {
            panic!()
        };
        assert_eq!(w.data(), vec![1.0]);
    }

    #[test]
    fn reg_loss_identity_and_2i() {
        let v = ValueParam::Dense {
            w: Tensor::<f64>::eye(4),
        };
        assert_eq!(reg_loss(&v, 4).unwrap().item(), 0.0);
        let v = ValueParam::Dense {
            w: tensor::scale(&Tensor::<f64>::eye(4), 2.0),
        };
        assert_eq!(reg_loss(&v, 4).unwrap().item(), 4.0);
    }

    #[test]
    fn reg_loss_absent_is_usage_error() {
        assert!(matches!(
            reg_loss(&ValueParam::<f64>::Absent, 4),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn reg_loss_matches_elementwise_sum_oracle() {
        let w = rand_tensor(&[5, 5], 31);
        let direct = reg_loss(&ValueParam::Dense { w: w.clone() }, 5)
            .unwrap()
            .item();
        let mut oracle = 0.0;
        let data = w.data();
        for i in 0..5 {
            for j in 0..5 {
                let idm = if i == j { 1.0 } else { 0.0 };
                oracle += (idm - data[i * 5 + j]).powi(2);
            }
        }
        assert!((direct - oracle).abs() < 1e-12);
    }

    #[test]
    fn identical_adapter_outputs_give_uniform_attention() {
        let n = 4;
        let f = FusionLayer::<f64>::new(cfg(Some(6), ValueKind::Absent, n), 5, 7).unwrap();
        let y_o = rand_tensor(&[3, 5], 1);
        let one = rand_tensor(&[3, 5], 2);
        let y_a = tensor::stack0(&vec![one; n]).unwrap();
        let alpha = f.attention_scores(&y_o, &y_a).unwrap().data();
        for v in alpha {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn single_adapter_attention_is_one() {
        let f = FusionLayer::<f64>::new(cfg(Some(4), ValueKind::Absent, 1), 5, 3).unwrap();
        let y_o = rand_tensor(&[2, 5], 4);
        let y_a = tensor::stack0(&[rand_tensor(&[2, 5], 5)]).unwrap();
        let alpha = f.attention_scores(&y_o, &y_a).unwrap().data();
        for v in alpha {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_scores_on_disabled_attention_is_usage_error() {
        let f = FusionLayer::<f64>::new(cfg(None, ValueKind::Dense, 2), 4, 1).unwrap();
        let y_o = rand_tensor(&[2, 4], 6);
        let y_a = rand_tensor(&[2, 2, 4], 7);
        assert!(matches!(
            f.attention_scores(&y_o, &y_a),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn attention_scores_match_naive_loop_oracle() {
        let (t_len, n, d, d_att) = (4usize, 3usize, 6usize, 5usize);
        let f = FusionLayer::<f64>::new(cfg(Some(d_att), ValueKind::Absent, n), d, 11).unwrap();
        let y_o = rand_tensor(&[t_len, d], 8);
        let y_a = rand_tensor(&[n, t_len, d], 9);
        let got = f.attention_scores(&y_o, &y_a).unwrap().data();

        // naive per-(t,n) recomputation: project, layer norm, dot, softmax
        let qw = f.query.as_ref().unwrap().w.data();
        let kw = f.key.as_ref().unwrap().w.data();
        let eps = 1e-5f64;
        let project = |row: &[f64], w: &[f64]| -> Vec<f64> {
            (0..d_att)
                .map(|j| (0..d).map(|k| row[k] * w[k * d_att + j]).sum())
                .collect()
        };
        let ln = |v: &[f64]| -> Vec<f64> {
            let mu = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - mu) / (var + eps).sqrt()).collect()
        };
        let yo = y_o.data();
        let ya = y_a.data();
        for t in 0..t_len {
            let q = ln(&project(&yo[t * d..(t + 1) * d], &qw));
            let logits: Vec<f64> = (0..n)
                .map(|i| {
                    let row = &ya[(i * t_len + t) * d..(i * t_len + t + 1) * d];
                    let k = ln(&project(row, &kw));
                    q.iter().zip(&k).map(|(a, b)| a * b).sum()
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for i in 0..n {
                let want = exps[i] / total;
                let have = got[t * n + i];
                assert!((want - have).abs() < 1e-12, "t={t} n={i}: {have} vs {want}");
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_are_nonnegative() {
        let f = FusionLayer::<f64>::new(cfg(Some(8), ValueKind::Dense, 5), 6, 13).unwrap();
        let y_o = rand_tensor(&[7, 6], 14);
        let y_a = rand_tensor(&[5, 7, 6], 15);
        let alpha = f.attention_scores(&y_o, &y_a).unwrap();
        let data = alpha.data();
        for t in 0..7 {
            let row = &data[t * 5..(t + 1) * 5];
            assert!(row.iter().all(|&v| v >= 0.0));
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_value_attention_off_identical_adapters() {
        let n = 3;
        let mut f = FusionLayer::<f64>::new(cfg(None, ValueKind::Dense, n), 4, 17).unwrap();
        f.set_value(ValueParam::Dense {
            w: Tensor::eye(4),
        });
        let y = rand_tensor(&[2, 4], 18);
        let r = rand_tensor(&[2, 4], 19);
        let y_a = tensor::stack0(&vec![y.clone(); n]).unwrap();
        let out = f.forward(&r, &y_a).unwrap().data();
        for ((o, yv), rv) in out.iter().zip(y.data()).zip(r.data()) {
            assert!((o - (yv + rv)).abs() < 1e-12);
        }
    }

    #[test]
    fn fresh_dense_value_is_near_identity_passthrough() {
        let d = 8;
        let f = FusionLayer::<f64>::new(cfg(None, ValueKind::Dense, 1), d, 23).unwrap();
        let y1 = rand_tensor(&[3, d], 24);
        let r = rand_tensor(&[3, d], 25);
        let y_a = tensor::stack0(&[y1.clone()]).unwrap();
        let out = f.forward(&r, &y_a).unwrap().data();
        let tol = d as f64 * 1e-6;
        for ((o, yv), rv) in out.iter().zip(y1.data()).zip(r.data()) {
            assert!((o - (yv + rv)).abs() < tol);
        }
    }

    #[test]
    fn forward_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(310);
        for trial in 0..20 {
            let n = rng.gen_range(1..=5);
            let t_len = rng.gen_range(1..=7);
            let d = rng.gen_range(2..=16);
            let d_att = rng.gen_range(1..=8);
            let variant = trial % 3;
            let c = match variant {
                0 => cfg(Some(d_att), ValueKind::Dense, n),
                1 => cfg(None, ValueKind::Dense, n),
                _ => cfg(Some(d_att), ValueKind::Absent, n),
            };
            let f = FusionLayer::<f64>::new(c, d, rng.gen()).unwrap();
            let y_o = rand_tensor(&[t_len, d], rng.gen());
            let y_a = rand_tensor(&[n, t_len, d], rng.gen());

            let got = f.forward(&y_o, &y_a).unwrap().data();

            let alpha: Vec<f64> = if c.attention.enabled {
                f.attention_scores(&y_o, &y_a).unwrap().data()
            } else {
                vec![1.0 / n as f64; t_len * n]
            };
            let w: Option<Vec<f64>> = match f.value() {
                ValueParam::Dense { w } => Some(w.data()),
                _ => None,
            };
            let ya = y_a.data();
            let yo = y_o.data();
            let mut want = vec![0.0f64; t_len * d];
            for nn in 0..n {
                for t in 0..t_len {
                    let row = &ya[(nn * t_len + t) * d..(nn * t_len + t + 1) * d];
                    for j in 0..d {
                        let vw = match &w {
                            Some(wm) => (0..d).map(|k| row[k] * wm[k * d + j]).sum::<f64>(),
                            None => row[j],
                        };
                        want[t * d + j] += alpha[t * n + nn] * vw;
                    }
                }
            }
            for (i, v) in want.iter_mut().enumerate() {
                *v += yo[i];
            }
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "trial {trial}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn permuting_adapters_permutes_alpha_and_preserves_output() {
        let n = 4;
        let d = 6;
        let f = FusionLayer::<f64>::new(cfg(Some(5), ValueKind::Dense, n), d, 41).unwrap();
        let y_o = rand_tensor(&[3, d], 42);
        let parts: Vec<Tensor<f64>> = (0..n).map(|i| rand_tensor(&[3, d], 50 + i as u64)).collect();
        let fwd = |order: &[usize]| {
            let stacked =
                tensor::stack0(&order.iter().map(|&i| parts[i].clone()).collect::<Vec<_>>())
                    .unwrap();
            (
                f.attention_scores(&y_o, &stacked).unwrap().data(),
                f.forward(&y_o, &stacked).unwrap().data(),
            )
        };
        let (alpha_id, out_id) = fwd(&[0, 1, 2, 3]);
        let perm = [2usize, 0, 3, 1];
        let (alpha_p, out_p) = fwd(&perm);
        for t in 0..3 {
            for (slot, &src) in perm.iter().enumerate() {
                assert!((alpha_p[t * n + slot] - alpha_id[t * n + src]).abs() < 1e-12);
            }
        }
        for (a, b) in out_p.iter().zip(&out_id) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn n_mismatch_is_a_shape_error() {
        let f = FusionLayer::<f64>::new(cfg(Some(4), ValueKind::Dense, 3), 4, 2).unwrap();
        let y_o = rand_tensor(&[2, 4], 1);
        let y_a = rand_tensor(&[2, 2, 4], 2); // N=2, config says 3
        assert!(matches!(
            f.forward(&y_o, &y_a),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn table_one_parameter_counts() {
        let d = 256;
        let rows = [
            (cfg(Some(256), ValueKind::Dense, 14), 197_632usize),
            (cfg(Some(64), ValueKind::Dense, 14), 98_560),
            (cfg(Some(64), ValueKind::Absent, 14), 33_024),
            (cfg(None, ValueKind::Dense, 14), 65_536),
            (
                cfg(None, ValueKind::Householder { couples: 64, scaled: false }, 14),
                32_768,
            ),
            (
                cfg(None, ValueKind::Householder { couples: 64, scaled: true }, 14),
                33_024,
            ),
            (
                cfg(Some(64), ValueKind::Householder { couples: 64, scaled: true }, 14),
                66_048,
            ),
        ];
        for (c, want) in rows {
            assert_eq!(count_fusion_parameters(&c, d), want, "{c:?}");
        }
    }

    #[test]
    fn counts_match_instantiated_layers() {
        let d = 16;
        for c in [
            cfg(Some(16), ValueKind::Dense, 3),
            cfg(Some(4), ValueKind::Absent, 3),
            cfg(None, ValueKind::Dense, 3),
            cfg(None, ValueKind::Householder { couples: 5, scaled: true }, 3),
            cfg(Some(8), ValueKind::Householder { couples: 2, scaled: false }, 3),
        ] {
            let f = FusionLayer::<f64>::new(c, d, 5).unwrap();
            assert_eq!(
                f.trainable_scalar_count(),
                count_fusion_parameters(&c, d),
                "{c:?}"
            );
        }
    }
}
