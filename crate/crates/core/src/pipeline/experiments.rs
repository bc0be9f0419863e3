//! Named experiment variants and the result matrix.
//!
//! Rows mirror the adaptation methods under comparison: the raw pretrained
//! model, shared/per-speaker adapter baselines, a target-trained adapter,
//! fusion layers with full or reduced attention, value-only and
//! attention-only ablations, SVD-derived rotation/scaling replacements, and
//! Householder-parameterized values with a sweep over the couple count.

use std::collections::BTreeMap;

use crate::adapter::{adapter_param_count, clone_adapter};
use crate::analysis::{build_wuv, build_wsigma, svd_decompose};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::{
    count_fusion_parameters, AttentionConfig, FusionConfig, FusionLayer, ValueKind, ValueParam,
};
use crate::params::HasParams;
use crate::pipeline::corpus::{
    generate_canonical, generate_corpus, CorpusSpec,
};
use crate::pipeline::split::{find_speaker, SplitPlan};
use crate::pipeline::train::{
    cache_utterances, evaluate_stage_error, run_step, stream_rng, train_adapter_on_target,
    train_fusion_on_target, PipelineState, Step, TrainConfig,
};
use crate::tensor;
use crate::Tensor64;

/// Attention width used by the "full" rows (`d_att = d`).
pub fn full_attention_dim(d: usize) -> usize {
    d
}

/// Attention width used by the "reduced" rows (`d_att = d/4`).
pub fn reduced_attention_dim(d: usize) -> usize {
    (d / 4).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Pretrain,
    PretrainAdpt,
    SourceAdptAvg,
    TargetAdpt,
    /// Fusion with full-width attention and a dense value matrix.
    FusionFullAttW,
    /// Fusion with reduced attention and a dense value matrix.
    FusionRedAttW,
    /// Attention only; value layer ablated.
    FusionRedAtt,
    /// Dense value only; attention ablated.
    FusionW,
    /// Rotation-only SVD replacement of a trained dense value.
    FusionWuv,
    /// Scaling-only SVD replacement of a trained dense value.
    FusionWsigma,
    /// Unscaled Householder product value, attention ablated.
    FusionP { couples: usize },
    /// Scaled Householder product value, attention ablated.
    FusionWc { couples: usize },
    /// Scaled Householder product value with reduced attention.
    FusionRedAttWc { couples: usize },
}

impl Variant {
    /// Canonical row name; Householder rows carry their couple count.
    pub fn name(&self) -> String {
        match self {
            Variant::Pretrain => "Pretrain".into(),
            Variant::PretrainAdpt => "Pretrain-Adpt".into(),
            Variant::SourceAdptAvg => "Source-Adpt-avg".into(),
            Variant::TargetAdpt => "Target-Adpt".into(),
            Variant::FusionFullAttW => "Fusion-256dAtt+W".into(),
            Variant::FusionRedAttW => "Fusion-64dAtt+W".into(),
            Variant::FusionRedAtt => "Fusion-64dAtt".into(),
            Variant::FusionW => "Fusion-W".into(),
            Variant::FusionWuv => "Fusion-W_UV".into(),
            Variant::FusionWsigma => "Fusion-W_Sigma".into(),
            Variant::FusionP { couples } => format!("Fusion-P_{couples}"),
            Variant::FusionWc { couples } => format!("Fusion-W_{couples}"),
            Variant::FusionRedAttWc { couples } => format!("Fusion-64dAtt+W_{couples}"),
        }
    }

    /// Parse a variant name. `default_couples` fills the `_C` placeholder
    /// forms; explicit numeric suffixes override it.
    pub fn parse(name: &str, default_couples: usize) -> Result<Variant> {
        let v = match name {
            "Pretrain" => Variant::Pretrain,
            "Pretrain-Adpt" => Variant::PretrainAdpt,
            "Source-Adpt-avg" => Variant::SourceAdptAvg,
            "Target-Adpt" => Variant::TargetAdpt,
            "Fusion-256dAtt+W" => Variant::FusionFullAttW,
            "Fusion-64dAtt+W" => Variant::FusionRedAttW,
            "Fusion-64dAtt" => Variant::FusionRedAtt,
            "Fusion-W" => Variant::FusionW,
            "Fusion-W_UV" => Variant::FusionWuv,
            "Fusion-W_Sigma" | "Fusion-W_Σ" => Variant::FusionWsigma,
            "Fusion-P_C" => Variant::FusionP {
                couples: default_couples,
            },
            "Fusion-W_C" => Variant::FusionWc {
                couples: default_couples,
            },
            "Fusion-64dAtt+W_C" => Variant::FusionRedAttWc {
                couples: default_couples,
            },
            other => {
                if let Some(c) = other.strip_prefix("Fusion-P_") {
                    Variant::FusionP {
                        couples: parse_couples(c, other)?,
                    }
                } else if let Some(c) = other.strip_prefix("Fusion-64dAtt+W_") {
                    Variant::FusionRedAttWc {
                        couples: parse_couples(c, other)?,
                    }
                } else if let Some(c) = other.strip_prefix("Fusion-W_") {
                    Variant::FusionWc {
                        couples: parse_couples(c, other)?,
                    }
                } else {
                    return Err(Error::Config(format!("unknown variant `{other}`")));
                }
            }
        };
        Ok(v)
    }

    /// Fusion configuration, when this variant trains a fusion layer.
    pub fn fusion_config(&self, d: usize, n_adapters: usize) -> Option<FusionConfig> {
        let att = |d_att: usize| AttentionConfig {
            enabled: true,
            d_att,
        };
        let no_att = AttentionConfig {
            enabled: false,
            d_att: 0,
        };
        let cfg = match *self {
            Variant::FusionFullAttW => FusionConfig {
                attention: att(full_attention_dim(d)),
                value: ValueKind::Dense,
                n_adapters,
            },
            Variant::FusionRedAttW => FusionConfig {
                attention: att(reduced_attention_dim(d)),
                value: ValueKind::Dense,
                n_adapters,
            },
            Variant::FusionRedAtt => FusionConfig {
                attention: att(reduced_attention_dim(d)),
                value: ValueKind::Absent,
                n_adapters,
            },
            Variant::FusionW => FusionConfig {
                attention: no_att,
                value: ValueKind::Dense,
                n_adapters,
            },
            Variant::FusionP { couples } => FusionConfig {
                attention: no_att,
                value: ValueKind::Householder {
                    couples,
                    scaled: false,
                },
                n_adapters,
            },
            Variant::FusionWc { couples } => FusionConfig {
                attention: no_att,
                value: ValueKind::Householder {
                    couples,
                    scaled: true,
                },
                n_adapters,
            },
            Variant::FusionRedAttWc { couples } => FusionConfig {
                attention: att(reduced_attention_dim(d)),
                value: ValueKind::Householder {
                    couples,
                    scaled: true,
                },
                n_adapters,
            },
            _ => return None,
        };
        Some(cfg)
    }

    /// Target-specific trainable parameter count, absent for rows that train
    /// nothing on the target speaker.
    pub fn param_count(&self, d: usize, adapter_inner: usize, n_adapters: usize) -> Option<usize> {
        match self {
            Variant::TargetAdpt => Some(adapter_param_count(d, adapter_inner)),
            Variant::Pretrain
            | Variant::PretrainAdpt
            | Variant::SourceAdptAvg
            | Variant::FusionWuv
            | Variant::FusionWsigma => None,
            _ => self
                .fusion_config(d, n_adapters)
                .map(|cfg| count_fusion_parameters(&cfg, d)),
        }
    }

    /// All Table-style rows at the given couple counts.
    pub fn standard_set(couple_sweep: &[usize]) -> Vec<Variant> {
        let mut out = vec![
            Variant::Pretrain,
            Variant::PretrainAdpt,
            Variant::SourceAdptAvg,
            Variant::TargetAdpt,
            Variant::FusionFullAttW,
            Variant::FusionRedAttW,
            Variant::FusionRedAtt,
            Variant::FusionW,
            Variant::FusionWuv,
            Variant::FusionWsigma,
        ];
        for &c in couple_sweep {
            out.push(Variant::FusionP { couples: c });
            out.push(Variant::FusionWc { couples: c });
        }
        if let Some(&c) = couple_sweep.last() {
            out.push(Variant::FusionRedAttWc { couples: c });
        }
        out
    }
}

fn parse_couples(s: &str, whole: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| Error::Config(format!("unknown variant `{whole}`")))
}

// ── Result table ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub name: String,
    pub params: Option<usize>,
    pub error_rate: f64,
    pub data_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    /// Sort by variant name, then data fraction, then seed.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            a.name
                .cmp(&b.name)
                .then(a.data_fraction.partial_cmp(&b.data_fraction).expect("finite"))
                .then(a.seed.cmp(&b.seed))
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,params,error_rate,data_fraction,seed\n");
        for r in &self.rows {
            let params = r.params.map(|p| p.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.name, params, r.error_rate, r.data_fraction, r.seed
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<ResultTable> {
        let mut rows = Vec::new();
        let mut lines = text.lines();
        match lines.next() {
            Some("name,params,error_rate,data_fraction,seed") => {}
            other => {
                return Err(Error::Data(format!(
                    "unexpected result table header: {other:?}"
                )))
            }
        }
        for (no, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Data(format!(
                    "result table line {}: expected 5 fields",
                    no + 2
                )));
            }
            let parse_f = |s: &str, what: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Data(format!("bad {what} `{s}` on line {}", no + 2)))
            };
            rows.push(ResultRow {
                name: fields[0].to_string(),
                params: if fields[1].is_empty() {
                    None
                } else {
                    Some(fields[1].parse().map_err(|_| {
                        Error::Data(format!("bad params `{}` on line {}", fields[1], no + 2))
                    })?)
                },
                error_rate: parse_f(fields[2], "error_rate")?,
                data_fraction: parse_f(fields[3], "data_fraction")?,
                seed: fields[4].parse().map_err(|_| {
                    Error::Data(format!("bad seed `{}` on line {}", fields[4], no + 2))
                })?,
            });
        }
        Ok(ResultTable { rows })
    }
}

// ── The experiment matrix ────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub corpus_spec: CorpusSpec,
    pub canonical_utterances: usize,
    pub encoder: EncoderConfig,
    pub adapter_inner: usize,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub data_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub target_subset: usize,
}

/// Per-(variant, fraction, seed) outcome with both validation and test
/// errors; [`run_matrix`] projects these onto [`ResultRow`]s.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub name: String,
    pub params: Option<usize>,
    pub data_fraction: f64,
    pub seed: u64,
    /// Mean per-target corpus-level token error rate on the test folds.
    pub test_error: f64,
    /// Same on the validation folds.
    pub val_error: f64,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
}

/// Sources trained once per seed and shared by every variant row.
pub struct PreparedSources {
    pub state: PipelineState,
}

/// Run steps 1–3 for a seed: pretrained frozen backbone, shared adapter and
/// per-source-speaker adapters.
pub fn prepare_sources(plan: &ExperimentPlan, seed: u64) -> Result<PreparedSources> {
    let corpus = generate_corpus(&plan.corpus_spec, seed)?;
    let canonical = generate_canonical(
        &plan.corpus_spec,
        seed.wrapping_mul(0x9e37_79b9).wrapping_add(1),
        plan.canonical_utterances,
    )?;
    let split = SplitPlan::from_corpus(&corpus, plan.target_subset)?;
    let mut train_cfg = plan.train;
    train_cfg.seed = seed;
    let mut state = PipelineState::new(
        plan.encoder,
        plan.adapter_inner,
        AttentionConfig {
            enabled: false,
            d_att: 0,
        },
        ValueKind::Dense,
        train_cfg,
        corpus,
        canonical,
        split,
    )?;
    run_step(Step::Pretrain, &mut state)?;
    run_step(Step::SharedAdapter, &mut state)?;
    run_step(Step::SpeakerAdapters, &mut state)?;
    Ok(PreparedSources { state })
}

/// Evaluate one variant for every target speaker at one data fraction.
pub fn evaluate_variant(
    sources: &PreparedSources,
    variant: Variant,
    data_fraction: f64,
    seed: u64,
) -> Result<VariantRun> {
    let state = &sources.state;
    let model = &state.model;
    let d = state.encoder_cfg.model_dim;
    let n = state.source_adapters.len();
    let mut split = state.split.clone();
    split.low_resource_fraction = Some(data_fraction);

    let mut val_errors = Vec::new();
    let mut test_errors = Vec::new();
    let mut initial_losses = Vec::new();
    let mut final_losses = Vec::new();

    // Salt the per-target RNG stream by variant so rows are independent.
    let variant_salt = {
        let name = variant.name();
        name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64))
    };

    for (t_idx, target_id) in split.target_speakers.clone().iter().enumerate() {
        let speaker = find_speaker(&state.speakers, target_id)?;
        let folds = split.target_folds(speaker)?;
        let mut rng = stream_rng(seed, 1000 + variant_salt % 1000 + t_idx as u64 * 17);

        match variant {
            Variant::Pretrain => {
                let valid = cache_utterances(model, None, folds.valid.iter())?;
                let test = cache_utterances(model, None, folds.test.iter())?;
                val_errors.push(evaluate_stage_error(model, &valid, |i| Ok(i.y_o.clone()))?);
                test_errors.push(evaluate_stage_error(model, &test, |i| Ok(i.y_o.clone()))?);
            }
            Variant::PretrainAdpt => {
                let shared = state
                    .shared_adapter
                    .as_ref()
                    .ok_or_else(|| Error::MissingPrerequisite("shared adapter".into()))?;
                let valid = cache_utterances(model, None, folds.valid.iter())?;
                let test = cache_utterances(model, None, folds.test.iter())?;
                val_errors.push(evaluate_stage_error(model, &valid, |i| shared.forward(&i.y_o))?);
                test_errors.push(evaluate_stage_error(model, &test, |i| shared.forward(&i.y_o))?);
            }
            Variant::SourceAdptAvg => {
                let valid = cache_utterances(model, Some(&state.source_adapters), folds.valid.iter())?;
                let test = cache_utterances(model, Some(&state.source_adapters), folds.test.iter())?;
                let average = |i: &crate::pipeline::train::CachedUtterance| -> Result<Tensor64> {
                    mean_over_axis0(i.y_a.as_ref().expect("cached stack"))
                };
                val_errors.push(evaluate_stage_error(model, &valid, average)?);
                test_errors.push(evaluate_stage_error(model, &test, average)?);
            }
            Variant::TargetAdpt => {
                let shared = state
                    .shared_adapter
                    .as_ref()
                    .ok_or_else(|| Error::MissingPrerequisite("shared adapter".into()))?;
                let adapter = clone_adapter(shared);
                adapter.set_trainable(true);
                let outcome = train_adapter_on_target(
                    model,
                    &adapter,
                    folds.train,
                    folds.valid,
                    folds.test,
                    &state.train_cfg,
                    &mut rng,
                )?;
                val_errors.push(outcome.val_error);
                test_errors.push(outcome.test_error);
                initial_losses.push(outcome.initial_val_loss);
                final_losses.push(outcome.final_val_loss);
            }
            Variant::FusionWuv | Variant::FusionWsigma => {
                // ablations of a dense value trained on the same folds
                let dense_cfg = Variant::FusionW.fusion_config(d, n).expect("fusion cfg");
                let mut fusion = FusionLayer::with_rng(dense_cfg, d, &mut rng)?;
                train_fusion_on_target(
                    model,
                    &state.source_adapters,
                    &mut fusion,
                    folds.train,
                    folds.valid,
                    folds.test,
                    &state.train_cfg,
                    &mut rng,
                )?;
                let ValueParam::Dense { w } = fusion.value() else {
                    unreachable!("dense config")
                };
                let parts = svd_decompose(w)?;
                let replacement = match variant {
                    Variant::FusionWuv => build_wuv(&parts).matrix,
                    _ => build_wsigma(&parts, w)?.matrix,
                };
                fusion.set_value(ValueParam::Dense { w: replacement });
                let valid = cache_utterances(model, Some(&state.source_adapters), folds.valid.iter())?;
                let test = cache_utterances(model, Some(&state.source_adapters), folds.test.iter())?;
                let fwd = |i: &crate::pipeline::train::CachedUtterance| {
                    fusion.forward(&i.y_o, i.y_a.as_ref().expect("cached stack"))
                };
                val_errors.push(evaluate_stage_error(model, &valid, fwd)?);
                test_errors.push(evaluate_stage_error(model, &test, fwd)?);
            }
            _ => {
                let cfg = variant
                    .fusion_config(d, n)
                    .expect("trainable fusion variant");
                let mut fusion = FusionLayer::with_rng(cfg, d, &mut rng)?;
                let outcome = train_fusion_on_target(
                    model,
                    &state.source_adapters,
                    &mut fusion,
                    folds.train,
                    folds.valid,
                    folds.test,
                    &state.train_cfg,
                    &mut rng,
                )?;
                val_errors.push(outcome.val_error);
                test_errors.push(outcome.test_error);
                initial_losses.push(outcome.initial_val_loss);
                final_losses.push(outcome.final_val_loss);
            }
        }
    }

    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            f64::NAN
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    Ok(VariantRun {
        name: variant.name(),
        params: variant.param_count(d, state.adapter_inner, n),
        data_fraction,
        seed,
        test_error: mean(&test_errors),
        val_error: mean(&val_errors),
        initial_val_loss: mean(&initial_losses),
        final_val_loss: mean(&final_losses),
    })
}

fn mean_over_axis0(stack: &Tensor64) -> Result<Tensor64> {
    let n = stack.shape()[0];
    let mut acc: Option<Tensor64> = None;
    for i in 0..n {
        let s = tensor::slice0(stack, i)?;
        acc = Some(match acc {
            Some(a) => tensor::add(&a, &s)?,
            None => s,
        });
    }
    Ok(tensor::scale(
        &acc.ok_or_else(|| Error::Data("empty adapter stack".into()))?,
        1.0 / n as f64,
    ))
}

/// Run every (seed × variant × data fraction) cell of the plan.
pub fn run_seed(plan: &ExperimentPlan, seed: u64) -> Result<Vec<VariantRun>> {
    let sources = prepare_sources(plan, seed)?;
    let mut runs = Vec::new();
    for &fraction in &plan.data_fractions {
        for &variant in &plan.variants {
            runs.push(evaluate_variant(&sources, variant, fraction, seed)?);
        }
    }
    Ok(runs)
}

/// Execute the full matrix and collect the result table, sorted by variant
/// name then data fraction then seed.
pub fn run_matrix(plan: &ExperimentPlan) -> Result<ResultTable> {
    if plan.variants.is_empty() || plan.seeds.is_empty() || plan.data_fractions.is_empty() {
        return Err(Error::Config(
            "experiment plan needs variants, seeds and data fractions".into(),
        ));
    }
    let mut table = ResultTable::default();
    for &seed in &plan.seeds {
        for run in run_seed(plan, seed)? {
            table.rows.push(ResultRow {
                name: run.name,
                params: run.params,
                error_rate: run.test_error,
                data_fraction: run.data_fraction,
                seed: run.seed,
            });
        }
    }
    table.sort();
    Ok(table)
}

/// Group runs as `name -> mean value` using a field selector; helper for
/// mean-over-seeds comparisons.
pub fn mean_by_name(runs: &[VariantRun], pick: impl Fn(&VariantRun) -> f64) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in runs {
        let e = acc.entry(r.name.clone()).or_insert((0.0, 0));
        e.0 += pick(r);
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (sum, n))| (k, sum / n as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::standard_set(&[1, 8, 64]) {
            let name = v.name();
            let parsed = Variant::parse(&name, 64).unwrap();
            assert_eq!(parsed, v, "{name}");
        }
    }

    #[test]
    fn placeholder_names_use_default_couples() {
        assert_eq!(
            Variant::parse("Fusion-W_C", 8).unwrap(),
            Variant::FusionWc { couples: 8 }
        );
        assert_eq!(
            Variant::parse("Fusion-P_C", 2).unwrap(),
            Variant::FusionP { couples: 2 }
        );
        assert_eq!(
            Variant::parse("Fusion-W_Σ", 2).unwrap(),
            Variant::FusionWsigma
        );
        assert!(Variant::parse("Fusion-Nope", 2).is_err());
    }

    #[test]
    fn param_counts_at_paper_scale() {
        let d = 256;
        let cases = [
            (Variant::FusionFullAttW, Some(197_632)),
            (Variant::FusionRedAttW, Some(98_560)),
            (Variant::FusionRedAtt, Some(33_024)),
            (Variant::FusionW, Some(65_536)),
            (Variant::FusionP { couples: 64 }, Some(32_768)),
            (Variant::FusionWc { couples: 64 }, Some(33_024)),
            (Variant::FusionRedAttWc { couples: 64 }, Some(66_048)),
            (Variant::TargetAdpt, Some(131_584)),
            (Variant::Pretrain, None),
            (Variant::SourceAdptAvg, None),
            (Variant::FusionWuv, None),
            (Variant::FusionWsigma, None),
        ];
        for (v, want) in cases {
            assert_eq!(v.param_count(d, 256, 14), want, "{}", v.name());
        }
    }

    #[test]
    fn csv_roundtrip_and_sorting() {
        let mut table = ResultTable {
            rows: vec![
                ResultRow {
                    name: "Fusion-W".into(),
                    params: Some(65_536),
                    error_rate: 0.125,
                    data_fraction: 0.6,
                    seed: 2,
                },
                ResultRow {
                    name: "Fusion-W".into(),
                    params: Some(65_536),
                    error_rate: 0.25,
                    data_fraction: 0.05,
                    seed: 1,
                },
                ResultRow {
                    name: "Pretrain".into(),
                    params: None,
                    error_rate: 0.5,
                    data_fraction: 0.6,
                    seed: 1,
                },
            ],
        };
        table.sort();
        assert_eq!(table.rows[0].data_fraction, 0.05);
        assert_eq!(table.rows[2].name, "Pretrain");
        let csv = table.to_csv();
        let back = ResultTable::from_csv(&csv).unwrap();
        assert_eq!(back, table);
        assert!(csv.starts_with("name,params,error_rate,data_fraction,seed\n"));
        assert!(csv.contains("Pretrain,,0.5,0.6,1"));
    }
}
