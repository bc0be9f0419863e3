//! Training loops for the four-step strategy, with early stopping and
//! checkpoint averaging.
//!
//! Step 1 pretrains the backbone on clean data and freezes it. Step 2 trains
//! one shared adapter jointly on the source speakers. Step 3 clones the
//! shared adapter per source speaker, trains each on that speaker only and
//! freezes all of them. Step 4 inserts the fusion layer over the frozen
//! adapters and trains only it on target-speaker folds.
//!
//! Once the backbone is frozen its outputs are constants, so steps 2–4 cache
//! `Y_O` (and, in step 4, the stacked adapter outputs) per utterance and
//! train the small modules on those caches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{clone_adapter, Activation, AdapterLayer};
use crate::checkpoint::{self, ParamMap};
use crate::encoder::{combine_losses, AdapterStage, EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::fusion::{AttentionConfig, FusionConfig, FusionLayer, ValueKind};
use crate::optim::Adam;
use crate::params::HasParams;
use crate::pipeline::corpus::{SyntheticSpeaker, Utterance};
use crate::pipeline::metrics::corpus_token_error_rate;
use crate::pipeline::split::{ninety_ten, SplitPlan};
use crate::tensor::Tensor;
use crate::{Adapter64, Encoder64, Fusion64, Tensor64};

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Learning rate for the adapter and fusion steps (2–4).
    pub lr: f64,
    /// Learning rate for backbone pretraining (step 1).
    pub pretrain_lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub checkpoint_average_k: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            pretrain_lr: 1e-3,
            batch_size: 32,
            patience: 20,
            checkpoint_average_k: 3,
            lambda1: 0.3,
            lambda2: 0.01,
            max_epochs: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.pretrain_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("checkpoint_average_k", self.checkpoint_average_k),
            ("max_epochs", self.max_epochs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda1) {
            return Err(Error::Config(format!(
                "lambda1 {} outside [0, 1]",
                self.lambda1
            )));
        }
        if self.lambda2 < 0.0 {
            return Err(Error::Config("lambda2 must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Independent deterministic RNG stream derived from the run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ── Early stopping and checkpoint averaging ──────────────────────────

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub snapshot: ParamMap,
}

/// Stops once validation accuracy has not improved for `patience` epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
        }
    }

    /// Record one epoch; returns true when training should stop now.
    pub fn observe(&mut self, epoch: usize, val_accuracy: f64) -> bool {
        match self.best {
            Some((_, best_acc)) if val_accuracy <= best_acc => {}
            _ => self.best = Some((epoch, val_accuracy)),
        }
        let (best_epoch, _) = self.best.expect("observed at least once");
        epoch.saturating_sub(best_epoch) >= self.patience
    }
}

#[derive(Debug, Clone)]
pub struct AveragedCheckpoint {
    pub params: ParamMap,
    /// Epochs whose snapshots were averaged, best first.
    pub source_epochs: Vec<usize>,
    /// Epoch at which early stopping fired, if it did.
    pub stop_epoch: Option<usize>,
    /// Set when fewer than `k` checkpoints were available.
    pub warning: Option<String>,
}

/// Replay `history` through the early-stopping rule, then average the `k`
/// records with the highest validation accuracy (ties broken toward earlier
/// epochs). With fewer than `k` records, all are used and a warning recorded.
pub fn early_stop_and_average(
    history: &[EpochRecord],
    k: usize,
    patience: usize,
) -> Result<AveragedCheckpoint> {
    if history.is_empty() {
        return Err(Error::Data("early_stop_and_average on empty history".into()));
    }
    let mut stopper = EarlyStopper::new(patience);
    let mut effective = Vec::new();
    let mut stop_epoch = None;
    for rec in history {
        effective.push(rec);
        if stopper.observe(rec.epoch, rec.val_accuracy) {
            stop_epoch = Some(rec.epoch);
            break;
        }
    }

    let mut ranked: Vec<&&EpochRecord> = effective.iter().collect();
    ranked.sort_by(|a, b| {
        b.val_accuracy
            .partial_cmp(&a.val_accuracy)
            .expect("finite accuracy")
            .then(a.epoch.cmp(&b.epoch))
    });
    let take = k.min(ranked.len());
    let warning = (ranked.len() < k).then(|| {
        format!(
            "requested {} checkpoints to average but only {} recorded",
            k,
            ranked.len()
        )
    });
    let chosen: Vec<&&EpochRecord> = ranked[..take].to_vec();
    let maps: Vec<ParamMap> = chosen.iter().map(|r| r.snapshot.clone()).collect();
    Ok(AveragedCheckpoint {
        params: checkpoint::average(&maps)?,
        source_epochs: chosen.iter().map(|r| r.epoch).collect(),
        stop_epoch,
        warning,
    })
}

// ── Generic fit loop ─────────────────────────────────────────────────

pub(crate) struct FitSummary {
    pub epochs_run: usize,
    pub best_val_accuracy: f64,
    pub stop_epoch: Option<usize>,
}

/// Epoch loop: shuffle, minibatch Adam steps, per-epoch validation snapshot,
/// early stop, then restore the averaged best-k checkpoint into the params.
pub(crate) fn fit_and_restore<FB, FV>(
    trainable: &[Tensor64],
    snapshot_params: &[(String, Tensor64)],
    cfg: &TrainConfig,
    n_train: usize,
    rng: &mut ChaCha8Rng,
    mut batch_loss: FB,
    mut val_accuracy: FV,
) -> Result<FitSummary>
where
    FB: FnMut(&[usize]) -> Result<Tensor64>,
    FV: FnMut() -> Result<f64>,
{
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::Data("no training utterances".into()));
    }
    let mut opt = Adam::new(trainable.to_vec(), cfg.lr);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut history: Vec<EpochRecord> = Vec::new();

    for epoch in 0..cfg.max_epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            opt.zero_grad();
            let loss = batch_loss(chunk)?;
            loss.backward()?;
            opt.step();
        }
        let acc = val_accuracy()?;
        history.push(EpochRecord {
            epoch,
            val_accuracy: acc,
            snapshot: checkpoint::snapshot(snapshot_params),
        });
        if stopper.observe(epoch, acc) {
            break;
        }
    }

    let averaged = early_stop_and_average(&history, cfg.checkpoint_average_k, cfg.patience)?;
    checkpoint::restore(snapshot_params, &averaged.params)?;
    Ok(FitSummary {
        epochs_run: history.len(),
        best_val_accuracy: history
            .iter()
            .map(|r| r.val_accuracy)
            .fold(f64::NEG_INFINITY, f64::max),
        stop_epoch: averaged.stop_epoch,
    })
}

// ── Cached utterances ────────────────────────────────────────────────

/// Backbone (and optionally adapter-stack) outputs cached per utterance.
pub(crate) struct CachedUtterance {
    pub y_o: Tensor64,
    pub y_a: Option<Tensor64>,
    pub labels: Vec<usize>,
}

pub(crate) fn cache_utterances<'a, I>(
    model: &Encoder64,
    adapters: Option<&[(String, Adapter64)]>,
    utterances: I,
) -> Result<Vec<CachedUtterance>>
where
    I: IntoIterator<Item = &'a Utterance>,
{
    utterances
        .into_iter()
        .map(|u| {
            let y_o = model.encode(&u.tokens)?;
            let y_a = match adapters {
                Some(list) => {
                    let refs: Vec<&Adapter64> = list.iter().map(|(_, a)| a).collect();
                    Some(crate::adapter::stack_adapter_outputs(&refs, &y_o)?)
                }
                None => None,
            };
            Ok(CachedUtterance {
                y_o,
                y_a,
                labels: u.labels.clone(),
            })
        })
        .collect()
}

fn accuracy_over<F>(items: &[CachedUtterance], model: &Encoder64, forward: F) -> Result<f64>
where
    F: Fn(&CachedUtterance) -> Result<Tensor64>,
{
    let mut correct = 0usize;
    let mut total = 0usize;
    for item in items {
        let hidden = forward(item)?;
        let hyp = model.predict_on_hidden(&hidden)?;
        correct += hyp
            .iter()
            .zip(&item.labels)
            .filter(|(h, l)| h == l)
            .count();
        total += item.labels.len();
    }
    if total == 0 {
        return Err(Error::Data("validation set has no labeled positions".into()));
    }
    Ok(correct as f64 / total as f64)
}

fn error_rate_over<F>(items: &[CachedUtterance], model: &Encoder64, forward: F) -> Result<f64>
where
    F: Fn(&CachedUtterance) -> Result<Tensor64>,
{
    let mut pairs: Vec<(Vec<usize>, Vec<usize>)> = Vec::with_capacity(items.len());
    for item in items {
        let hidden = forward(item)?;
        pairs.push((model.predict_on_hidden(&hidden)?, item.labels.clone()));
    }
    Ok(corpus_token_error_rate(
        pairs.iter().map(|(h, r)| (h.as_slice(), r.as_slice())),
    ))
}

// ── Pipeline state machine ───────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Pretrain,
    SharedAdapter,
    SpeakerAdapters,
    FusionTraining,
}

impl Step {
    pub fn number(self) -> u8 {
        match self {
            Step::Pretrain => 1,
            Step::SharedAdapter => 2,
            Step::SpeakerAdapters => 3,
            Step::FusionTraining => 4,
        }
    }

    pub fn from_number(n: u8) -> Result<Step> {
        match n {
            1 => Ok(Step::Pretrain),
            2 => Ok(Step::SharedAdapter),
            3 => Ok(Step::SpeakerAdapters),
            4 => Ok(Step::FusionTraining),
            other => Err(Error::Config(format!("no step {other}; steps are 1-4"))),
        }
    }
}

/// Outcome of step 4 for one target speaker.
pub struct TargetRun {
    pub speaker_id: String,
    pub fusion: Fusion64,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub val_error: f64,
    pub test_error: f64,
}

pub struct PipelineState {
    pub encoder_cfg: EncoderConfig,
    pub adapter_inner: usize,
    pub fusion_attention: AttentionConfig,
    pub fusion_value: ValueKind,
    pub train_cfg: TrainConfig,
    pub model: Encoder64,
    pub speakers: Vec<SyntheticSpeaker>,
    pub canonical: Vec<Utterance>,
    pub split: SplitPlan,
    pub shared_adapter: Option<Adapter64>,
    pub source_adapters: Vec<(String, Adapter64)>,
    pub target_runs: Vec<TargetRun>,
    completed: u8,
}

impl PipelineState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        encoder_cfg: EncoderConfig,
        adapter_inner: usize,
        fusion_attention: AttentionConfig,
        fusion_value: ValueKind,
        train_cfg: TrainConfig,
        speakers: Vec<SyntheticSpeaker>,
        canonical: Vec<Utterance>,
        split: SplitPlan,
    ) -> Result<Self> {
        encoder_cfg.validate()?;
        train_cfg.validate()?;
        split.validate()?;
        if adapter_inner == 0 {
            return Err(Error::Config("adapter_inner must be positive".into()));
        }
        let model = EncoderModel::new(encoder_cfg, train_cfg.seed)?;
        Ok(PipelineState {
            encoder_cfg,
            adapter_inner,
            fusion_attention,
            fusion_value,
            train_cfg,
            model,
            speakers,
            canonical,
            split,
            shared_adapter: None,
            source_adapters: Vec::new(),
            target_runs: Vec::new(),
            completed: 0,
        })
    }

    pub fn completed_step(&self) -> u8 {
        self.completed
    }

    /// Restore progress flags after loading artifacts from disk.
    pub fn mark_completed(&mut self, step: u8) {
        self.completed = step;
    }

    fn require_order(&self, step: Step) -> Result<()> {
        let want = step.number();
        if self.completed + 1 != want {
            return Err(Error::State(format!(
                "step {} requested but {} steps completed; steps run in order",
                want, self.completed
            )));
        }
        Ok(())
    }

    fn require_frozen(named: &[(String, Tensor64)], what: &str) -> Result<()> {
        for (name, t) in named {
            if t.requires_grad() {
                return Err(Error::NumericalInvariant(format!(
                    "{what} must be frozen before this step; `{name}` is trainable"
                )));
            }
        }
        Ok(())
    }
}

/// Per-unit training summary inside a step report.
pub struct UnitReport {
    pub name: String,
    pub epochs_run: usize,
    pub best_val_accuracy: f64,
}

pub struct StepReport {
    pub step: u8,
    pub units: Vec<UnitReport>,
}

/// Execute one step of the four-step strategy, enforcing order and freeze
/// prerequisites.
pub fn run_step(step: Step, state: &mut PipelineState) -> Result<StepReport> {
    match step {
        Step::Pretrain => run_pretrain(state),
        Step::SharedAdapter => run_shared_adapter(state),
        Step::SpeakerAdapters => run_speaker_adapters(state),
        Step::FusionTraining => run_fusion_training(state),
    }
}

fn run_pretrain(state: &mut PipelineState) -> Result<StepReport> {
    state.require_order(Step::Pretrain)?;
    if state.canonical.len() < 10 {
        return Err(Error::Data("pretraining needs at least 10 clean utterances".into()));
    }
    let (train, valid) = ninety_ten(&state.canonical);
    let cfg = state.train_cfg;
    let mut rng = stream_rng(cfg.seed, 101);

    state.model.set_backbone_trainable(true);
    let snapshot_params = state.model.backbone_named_params();
    let trainable: Vec<Tensor64> = snapshot_params.iter().map(|(_, t)| t.clone()).collect();

    let model = &state.model;
    let train_items: Vec<(Vec<usize>, Vec<usize>)> = train
        .iter()
        .map(|u| (u.tokens.clone(), u.labels.clone()))
        .collect();
    let valid_items: Vec<(Vec<usize>, Vec<usize>)> = valid
        .iter()
        .map(|u| (u.tokens.clone(), u.labels.clone()))
        .collect();

    let summary = fit_and_restore(
        &trainable,
        &snapshot_params,
        &cfg,
        train_items.len(),
        &mut rng,
        |batch| {
            let items: Vec<(Vec<usize>, Vec<usize>)> =
                batch.iter().map(|&i| train_items[i].clone()).collect();
            let (lp, la) = model.task_losses(&items)?;
            combine_losses(&lp, &la, &Tensor::scalar(0.0), cfg.lambda1, 0.0)
        },
        || {
            let mut correct = 0usize;
            let mut total = 0usize;
            for (tokens, labels) in &valid_items {
                let hyp = model.predict(tokens)?;
                correct += hyp.iter().zip(labels).filter(|(h, l)| h == l).count();
                total += labels.len();
            }
            Ok(correct as f64 / total.max(1) as f64)
        },
    )?;

    state.model.freeze_backbone();
    state.completed = 1;
    Ok(StepReport {
        step: 1,
        units: vec![UnitReport {
            name: "backbone".into(),
            epochs_run: summary.epochs_run,
            best_val_accuracy: summary.best_val_accuracy,
        }],
    })
}

fn run_shared_adapter(state: &mut PipelineState) -> Result<StepReport> {
    state.require_order(Step::SharedAdapter)?;
    PipelineState::require_frozen(&state.model.backbone_named_params(), "backbone")?;

    let cfg = state.train_cfg;
    let mut init_rng = stream_rng(cfg.seed, 201);
    let adapter = AdapterLayer::new(
        state.encoder_cfg.model_dim,
        state.adapter_inner,
        Activation::Gelu,
        &mut init_rng,
    );

    let (train, valid) = state.split.joint_adapter_split(&state.speakers)?;
    let train_cache = cache_utterances(&state.model, None, train.iter().copied())?;
    let valid_cache = cache_utterances(&state.model, None, valid.iter().copied())?;

    let snapshot_params = adapter.named_params();
    let trainable = adapter.trainable_params();
    let mut rng = stream_rng(cfg.seed, 202);
    let model = &state.model;
    let summary = fit_and_restore(
        &trainable,
        &snapshot_params,
        &cfg,
        train_cache.len(),
        &mut rng,
        |batch| {
            let hidden: Vec<(Tensor64, Vec<usize>)> = batch
                .iter()
                .map(|&i| {
                    let item = &train_cache[i];
                    Ok((adapter.forward(&item.y_o)?, item.labels.clone()))
                })
                .collect::<Result<_>>()?;
            let (lp, la) = model.task_losses_on_hidden(&hidden)?;
            combine_losses(&lp, &la, &Tensor::scalar(0.0), cfg.lambda1, 0.0)
        },
        || accuracy_over(&valid_cache, model, |item| adapter.forward(&item.y_o)),
    )?;

    adapter.set_trainable(false);
    state.model.set_stage(AdapterStage::Single {
        name: "shared".into(),
        adapter: adapter.share(),
    });
    state.shared_adapter = Some(adapter);
    state.completed = 2;
    Ok(StepReport {
        step: 2,
        units: vec![UnitReport {
            name: "shared".into(),
            epochs_run: summary.epochs_run,
            best_val_accuracy: summary.best_val_accuracy,
        }],
    })
}

fn run_speaker_adapters(state: &mut PipelineState) -> Result<StepReport> {
    state.require_order(Step::SpeakerAdapters)?;
    let shared = state
        .shared_adapter
        .as_ref()
        .ok_or_else(|| Error::MissingPrerequisite("shared adapter from step 2".into()))?;
    PipelineState::require_frozen(&shared.named_params(), "shared adapter")?;

    let cfg = state.train_cfg;
    let mut units = Vec::new();
    let mut adapters = Vec::new();
    for (idx, speaker_id) in state.split.source_speakers.clone().iter().enumerate() {
        let speaker = crate::pipeline::split::find_speaker(&state.speakers, speaker_id)?;
        let (train, valid) = ninety_ten(&speaker.utterances);
        let train_cache = cache_utterances(&state.model, None, train.iter())?;
        let valid_cache = cache_utterances(&state.model, None, valid.iter())?;

        let adapter = clone_adapter(shared);
        adapter.set_trainable(true);
        let snapshot_params = adapter.named_params();
        let trainable = adapter.trainable_params();
        let mut rng = stream_rng(cfg.seed, 300 + idx as u64);
        let model = &state.model;
        let summary = fit_and_restore(
            &trainable,
            &snapshot_params,
            &cfg,
            train_cache.len(),
            &mut rng,
            |batch| {
                let hidden: Vec<(Tensor64, Vec<usize>)> = batch
                    .iter()
                    .map(|&i| {
                        let item = &train_cache[i];
                        Ok((adapter.forward(&item.y_o)?, item.labels.clone()))
                    })
                    .collect::<Result<_>>()?;
                let (lp, la) = model.task_losses_on_hidden(&hidden)?;
                combine_losses(&lp, &la, &Tensor::scalar(0.0), cfg.lambda1, 0.0)
            },
            || accuracy_over(&valid_cache, model, |item| adapter.forward(&item.y_o)),
        )?;
        adapter.set_trainable(false);
        units.push(UnitReport {
            name: speaker_id.clone(),
            epochs_run: summary.epochs_run,
            best_val_accuracy: summary.best_val_accuracy,
        });
        adapters.push((speaker_id.clone(), adapter));
    }

    state.source_adapters = adapters;
    state.completed = 3;
    Ok(StepReport { step: 3, units })
}

fn run_fusion_training(state: &mut PipelineState) -> Result<StepReport> {
    state.require_order(Step::FusionTraining)?;
    if state.source_adapters.is_empty() {
        return Err(Error::MissingPrerequisite(
            "per-speaker adapters from step 3".into(),
        ));
    }
    for (name, a) in &state.source_adapters {
        PipelineState::require_frozen(&a.named_params(), &format!("adapter/{name}"))?;
    }

    let cfg = state.train_cfg;
    let fusion_cfg = FusionConfig {
        attention: state.fusion_attention,
        value: state.fusion_value,
        n_adapters: state.source_adapters.len(),
    };

    let mut units = Vec::new();
    let mut runs = Vec::new();
    for (idx, target_id) in state.split.target_speakers.clone().iter().enumerate() {
        let speaker = crate::pipeline::split::find_speaker(&state.speakers, target_id)?;
        let folds = state.split.target_folds(speaker)?;
        let mut rng = stream_rng(cfg.seed, 400 + idx as u64);
        let mut fusion = FusionLayer::with_rng(fusion_cfg, state.encoder_cfg.model_dim, &mut rng)?;
        let outcome = train_fusion_on_target(
            &state.model,
            &state.source_adapters,
            &mut fusion,
            folds.train,
            folds.valid,
            folds.test,
            &cfg,
            &mut rng,
        )?;
        units.push(UnitReport {
            name: target_id.clone(),
            epochs_run: outcome.epochs_run,
            best_val_accuracy: outcome.best_val_accuracy,
        });
        runs.push(TargetRun {
            speaker_id: target_id.clone(),
            fusion,
            initial_val_loss: outcome.initial_val_loss,
            final_val_loss: outcome.final_val_loss,
            val_error: outcome.val_error,
            test_error: outcome.test_error,
        });
    }

    state.target_runs = runs;
    state.completed = 4;
    Ok(StepReport { step: 4, units })
}

// ── Target-speaker training routines (shared with the experiment matrix) ──

pub(crate) struct TargetOutcome {
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub val_error: f64,
    pub test_error: f64,
    pub epochs_run: usize,
    pub best_val_accuracy: f64,
}

/// Train only a fusion layer on one target speaker's folds, over frozen
/// adapters and a frozen backbone.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_fusion_on_target(
    model: &Encoder64,
    adapters: &[(String, Adapter64)],
    fusion: &mut Fusion64,
    train: &[Utterance],
    valid: &[Utterance],
    test: &[Utterance],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TargetOutcome> {
    let train_cache = cache_utterances(model, Some(adapters), train.iter())?;
    let valid_cache = cache_utterances(model, Some(adapters), valid.iter())?;
    let test_cache = cache_utterances(model, Some(adapters), test.iter())?;

    let has_value = !matches!(fusion.value(), crate::fusion::ValueParam::Absent);
    let loss_over = |fusion: &Fusion64, items: &[&CachedUtterance]| -> Result<Tensor64> {
        let hidden: Vec<(Tensor64, Vec<usize>)> = items
            .iter()
            .map(|item| {
                Ok((
                    fusion.forward(&item.y_o, item.y_a.as_ref().expect("cached stack"))?,
                    item.labels.clone(),
                ))
            })
            .collect::<Result<_>>()?;
        let (lp, la) = model.task_losses_on_hidden(&hidden)?;
        let reg = if has_value {
            fusion.reg_loss()?
        } else {
            Tensor::scalar(0.0)
        };
        combine_losses(&lp, &la, &reg, cfg.lambda1, cfg.lambda2)
    };

    let all_valid: Vec<&CachedUtterance> = valid_cache.iter().collect();
    let initial_val_loss = loss_over(fusion, &all_valid)?.item();

    let snapshot_params = fusion.named_params();
    let trainable = fusion.trainable_params();
    let summary = fit_and_restore(
        &trainable,
        &snapshot_params,
        cfg,
        train_cache.len(),
        rng,
        |batch| {
            let items: Vec<&CachedUtterance> = batch.iter().map(|&i| &train_cache[i]).collect();
            loss_over(fusion, &items)
        },
        || {
            accuracy_over(&valid_cache, model, |item| {
                fusion.forward(&item.y_o, item.y_a.as_ref().expect("cached stack"))
            })
        },
    )?;

    let final_val_loss = loss_over(fusion, &all_valid)?.item();
    let fwd = |item: &CachedUtterance| fusion.forward(&item.y_o, item.y_a.as_ref().unwrap());
    Ok(TargetOutcome {
        initial_val_loss,
        final_val_loss,
        val_error: error_rate_over(&valid_cache, model, fwd)?,
        test_error: error_rate_over(&test_cache, model, fwd)?,
        epochs_run: summary.epochs_run,
        best_val_accuracy: summary.best_val_accuracy,
    })
}

/// Train a standalone adapter on one target speaker's folds.
pub(crate) fn train_adapter_on_target(
    model: &Encoder64,
    adapter: &Adapter64,
    train: &[Utterance],
    valid: &[Utterance],
    test: &[Utterance],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TargetOutcome> {
    let train_cache = cache_utterances(model, None, train.iter())?;
    let valid_cache = cache_utterances(model, None, valid.iter())?;
    let test_cache = cache_utterances(model, None, test.iter())?;

    let loss_over = |items: &[&CachedUtterance]| -> Result<Tensor64> {
        let hidden: Vec<(Tensor64, Vec<usize>)> = items
            .iter()
            .map(|item| Ok((adapter.forward(&item.y_o)?, item.labels.clone())))
            .collect::<Result<_>>()?;
        let (lp, la) = model.task_losses_on_hidden(&hidden)?;
        combine_losses(&lp, &la, &Tensor::scalar(0.0), cfg.lambda1, 0.0)
    };

    let all_valid: Vec<&CachedUtterance> = valid_cache.iter().collect();
    let initial_val_loss = loss_over(&all_valid)?.item();

    let snapshot_params = adapter.named_params();
    let trainable = adapter.trainable_params();
    let summary = fit_and_restore(
        &trainable,
        &snapshot_params,
        cfg,
        train_cache.len(),
        rng,
        |batch| {
            let items: Vec<&CachedUtterance> = batch.iter().map(|&i| &train_cache[i]).collect();
            loss_over(&items)
        },
        || accuracy_over(&valid_cache, model, |item| adapter.forward(&item.y_o)),
    )?;

    let final_val_loss = loss_over(&all_valid)?.item();
    let fwd = |item: &CachedUtterance| adapter.forward(&item.y_o);
    Ok(TargetOutcome {
        initial_val_loss,
        final_val_loss,
        val_error: error_rate_over(&valid_cache, model, fwd)?,
        test_error: error_rate_over(&test_cache, model, fwd)?,
        epochs_run: summary.epochs_run,
        best_val_accuracy: summary.best_val_accuracy,
    })
}

/// Evaluate a fixed (untrainable) stage on cached utterances; used for the
/// no-training baselines.
pub(crate) fn evaluate_stage_error(
    model: &Encoder64,
    items: &[CachedUtterance],
    forward: impl Fn(&CachedUtterance) -> Result<Tensor64>,
) -> Result<f64> {
    error_rate_over(items, model, forward)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, acc: f64, value: f64) -> EpochRecord {
        let mut snapshot = ParamMap::new();
        snapshot.insert(
            "w".into(),
            crate::checkpoint::ParamEntry {
                shape: vec![2],
                data: vec![value, -value],
            },
        );
        EpochRecord {
            epoch,
            val_accuracy: acc,
            snapshot,
        }
    }

    #[test]
    fn early_stopper_fires_after_patience_without_improvement() {
        let mut s = EarlyStopper::new(3);
        assert!(!s.observe(0, 0.9)); // best at epoch 0
        assert!(!s.observe(1, 0.8));
        assert!(!s.observe(2, 0.7));
        assert!(s.observe(3, 0.6)); // 3 epochs without improvement
    }

    #[test]
    fn early_stopper_resets_on_improvement() {
        let mut s = EarlyStopper::new(2);
        assert!(!s.observe(0, 0.5));
        assert!(!s.observe(1, 0.6)); // new best
        assert!(!s.observe(2, 0.55));
        assert!(s.observe(3, 0.55));
    }

    #[test]
    fn scripted_monotone_worsening_stops_at_e_plus_patience() {
        let patience = 20;
        let history: Vec<EpochRecord> = (0..100)
            .map(|e| rec(e, 1.0 - e as f64 * 0.01, e as f64))
            .collect();
        let avg = early_stop_and_average(&history, 3, patience).unwrap();
        assert_eq!(avg.stop_epoch, Some(patience));
    }

    #[test]
    fn averaging_identical_checkpoints_is_identity() {
        let history = vec![rec(0, 0.5, 7.0), rec(1, 0.6, 7.0), rec(2, 0.7, 7.0)];
        let avg = early_stop_and_average(&history, 3, 10).unwrap();
        assert_eq!(avg.params["w"].data, vec![7.0, -7.0]);
        assert!(avg.warning.is_none());
    }

    #[test]
    fn averaging_w_and_minus_w_is_zero() {
        let history = vec![rec(0, 0.5, 3.0), rec(1, 0.6, -3.0)];
        let avg = early_stop_and_average(&history, 2, 10).unwrap();
        assert_eq!(avg.params["w"].data, vec![0.0, 0.0]);
    }

    #[test]
    fn picks_highest_accuracy_checkpoints() {
        let history = vec![
            rec(0, 0.2, 0.0),
            rec(1, 0.9, 10.0),
            rec(2, 0.1, 100.0),
            rec(3, 0.8, 20.0),
        ];
        let avg = early_stop_and_average(&history, 2, 10).unwrap();
        assert_eq!(avg.source_epochs, vec![1, 3]);
        assert_eq!(avg.params["w"].data, vec![15.0, -15.0]);
    }

    #[test]
    fn fewer_checkpoints_than_k_warns_and_uses_all() {
        let history = vec![rec(0, 0.5, 4.0), rec(1, 0.6, 6.0)];
        let avg = early_stop_and_average(&history, 3, 10).unwrap();
        assert!(avg.warning.is_some());
        assert_eq!(avg.params["w"].data, vec![5.0, -5.0]);
    }

    #[test]
    fn step_numbers_roundtrip() {
        for n in 1..=4u8 {
            assert_eq!(Step::from_number(n).unwrap().number(), n);
        }
        assert!(Step::from_number(5).is_err());
    }
}
