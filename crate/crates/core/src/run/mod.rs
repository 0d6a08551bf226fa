//! Run orchestration: configuration, the training loop, checkpoints,
//! embedding export and evaluation reports.

mod checkpoint;
mod config;
mod report;
mod train;

pub use checkpoint::Checkpoint;
pub use config::{DatasetKind, LossKind, RunConfig, OUTPUT_DIR_ENV};
pub use report::{
    evaluate_embeddings, export_embeddings, load_embeddings, read_embeddings, write_embeddings, EvalMode,
    EvalParams, EvalReport,
};
pub use train::{
    embed_dataset, prepare_data, run_training, train, MetricsRecord, TrainOutcome, TrainSummary,
    CHECKPOINT_FILE, CONFIG_FILE, FAILURE_FILE, METRICS_FILE, SUMMARY_FILE,
};
