//! Training orchestration, checkpoints, reports and the command-line front end.

mod checkpoint;
pub mod cli;
mod config;
mod report;
mod train;

pub use checkpoint::{
    load_checkpoint, read_metadata, save_checkpoint, Checkpoint, ManifestEntry, Metadata, Role,
    FORMAT_VERSION, MAGIC,
};
pub use config::{format_stage_table, parse_stage_table, TrainConfig, ValSetSpec, ValSource};
pub use report::{model_report, report, ModelReport};
pub use train::{
    checkpoint_file_name, embed_all, epoch_batches, prepare, resume_run, select_best, train_run,
    CheckpointRecord, EpochMetrics, Prepared, TrainOutcome, TrainState, ValSet, METRICS_LOG,
};
