// Temporary: raw loss trajectories to separate optimizer dynamics from
// early-stopping artifacts.

use adafuse::adapter::clone_adapter;
use adafuse::encoder::{combine_losses, EncoderConfig};
use adafuse::fusion::{AttentionConfig, FusionConfig, FusionLayer, ValueKind};
use adafuse::optim::Adam;
use adafuse::params::HasParams;
use adafuse::pipeline::*;
use adafuse::tensor::Tensor;
use adafuse::Tensor64;

fn toy_encoder() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        model_dim: 32,
        num_heads: 2,
        ffn_dim: 64,
        vocab_in: 32,
        vocab_out: 16,
    }
}

#[test]
#[ignore]
fn debug_training() {
    let corpus_spec = CorpusSpec {
        num_speakers: 6,
        utterances_per_speaker: 100,
        ..CorpusSpec::default()
    };
    let train = TrainConfig {
        max_epochs: 150,
        ..TrainConfig::default()
    };
    let plan = ExperimentPlan {
        corpus_spec,
        canonical_utterances: 400,
        encoder: toy_encoder(),
        adapter_inner: 32,
        train,
        variants: vec![Variant::FusionW],
        data_fractions: vec![0.6],
        seeds: vec![11],
        target_subset: 1,
    };
    let sources = prepare_sources(&plan, 11).unwrap();
    let state = &sources.state;
    let model = &state.model;

    let target_id = &state.split.target_speakers[0];
    let speaker = state
        .speakers
        .iter()
        .find(|s| s.speaker_id == *target_id)
        .unwrap();
    eprintln!("target {target_id} severity {:?}", speaker.severity);
    let n_tr = 60;
    let train_utts = &speaker.utterances[..n_tr];
    let valid_utts = &speaker.utterances[n_tr..n_tr + 20];

    // manual fusion training without early stopping
    let cfg = FusionConfig {
        attention: AttentionConfig { enabled: false, d_att: 0 },
        value: ValueKind::Dense,
        n_adapters: state.source_adapters.len(),
    };
    let fusion = FusionLayer::new(cfg, 32, 5).unwrap();

    let cache = |utts: &[Utterance]| -> Vec<(Tensor64, Tensor64, Vec<usize>)> {
        utts.iter()
            .map(|u| {
                let y_o = model.encode(&u.tokens).unwrap();
                let refs: Vec<&adafuse::Adapter64> =
                    state.source_adapters.iter().map(|(_, a)| a).collect();
                let y_a = adafuse::adapter::stack_adapter_outputs(&refs, &y_o).unwrap();
                (y_o, y_a, u.labels.clone())
            })
            .collect()
    };
    let tr = cache(train_utts);
    let va = cache(valid_utts);

    let mut opt = Adam::new(fusion.trainable_params(), 1e-3);
    for epoch in 0..150 {
        let mut last = 0.0;
        for chunk in tr.chunks(32) {
            opt.zero_grad();
            let hidden: Vec<(Tensor64, Vec<usize>)> = chunk
                .iter()
                .map(|(yo, ya, l)| (fusion.forward(yo, ya).unwrap(), l.clone()))
                .collect();
            let (lp, la) = model.task_losses_on_hidden(&hidden).unwrap();
            let reg = fusion.reg_loss().unwrap();
            let loss = combine_losses(&lp, &la, &reg, 0.3, 0.01).unwrap();
            loss.backward().unwrap();
            opt.step();
            last = loss.item();
        }
        if epoch % 10 == 0 {
            let mut correct = 0;
            let mut total = 0;
            for (yo, ya, l) in &va {
                let h = fusion.forward(yo, ya).unwrap();
                let hyp = model.predict_on_hidden(&h).unwrap();
                correct += hyp.iter().zip(l).filter(|(a, b)| a == b).count();
                total += l.len();
            }
            eprintln!(
                "epoch {epoch:>3} loss {last:>8.4} val_acc {:.4}",
                correct as f64 / total as f64
            );
        }
    }

    // adapter training trajectory on the same speaker
    let adapter = clone_adapter(state.shared_adapter.as_ref().unwrap());
    adapter.set_trainable(true);
    let mut opt = Adam::new(adapter.trainable_params(), 1e-3);
    for epoch in 0..150 {
        let mut last = 0.0;
        for chunk in tr.chunks(32) {
            opt.zero_grad();
            let hidden: Vec<(Tensor64, Vec<usize>)> = chunk
                .iter()
                .map(|(yo, _, l)| (adapter.forward(yo).unwrap(), l.clone()))
                .collect();
            let (lp, la) = model.task_losses_on_hidden(&hidden).unwrap();
            let loss =
                combine_losses(&lp, &la, &Tensor::scalar(0.0), 0.3, 0.0).unwrap();
            loss.backward().unwrap();
            opt.step();
            last = loss.item();
        }
        if epoch % 10 == 0 {
            let mut correct = 0;
            let mut total = 0;
            for (yo, _, l) in &va {
                let h = adapter.forward(yo).unwrap();
                let hyp = model.predict_on_hidden(&h).unwrap();
                correct += hyp.iter().zip(l).filter(|(a, b)| a == b).count();
                total += l.len();
            }
            eprintln!(
                "adapter epoch {epoch:>3} loss {last:>8.4} val_acc {:.4}",
                correct as f64 / total as f64
            );
        }
    }
}
