//! The four-step training strategy on synthetic multi-speaker corpora:
//! splits, per-step training with freeze contracts, early stopping with
//! checkpoint averaging, metrics, and the named experiment matrix.

pub mod corpus;
pub mod experiments;
pub mod metrics;
pub mod split;
pub mod train;

pub use corpus::{
    generate_canonical, generate_corpus, read_corpus, write_corpus, CorpusSpec, Severity,
    SyntheticSpeaker, Utterance,
};
pub use experiments::{
    evaluate_variant, mean_by_name, prepare_sources, run_matrix, run_seed, ExperimentPlan,
    PreparedSources, ResultRow, ResultTable, Variant, VariantRun,
};
pub use metrics::{corpus_token_error_rate, levenshtein, token_error_rate};
pub use split::SplitPlan;
pub use train::{
    early_stop_and_average, run_step, stream_rng, AveragedCheckpoint, EarlyStopper, EpochRecord,
    PipelineState, Step, StepReport, TargetRun, TrainConfig, UnitReport,
};
