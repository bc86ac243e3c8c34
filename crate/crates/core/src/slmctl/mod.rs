//! Artifact plumbing around the library: checkpoints, dataset files,
//! pipeline configuration and orchestration, evaluation and the latency
//! benchmark.

mod bench;
mod checkpoint;
mod config;
mod dataset;
mod eval;
mod pipeline;

pub use bench::{bench, shared_prefix_prompts, BenchConfig, BenchReport, LatencySplit, PromptTiming};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, round_to_f32, save_checkpoint, TensorEntry, FORMAT_VERSION,
};
pub use config::{
    DataConfig, EvalStage, Paths, PipelineConfig, PruneHeadsStage, PruneMlpStage, QuantizeStage, Stage, TeacherConfig,
};
pub use dataset::{parse_dataset, read_dataset, write_dataset, LoadedDataset, DATASET_HEADER};
pub use eval::{eval, EvalRecord, Metric};
pub use pipeline::{
    calib_split, initial_student, make_splits, run_pipeline, write_synth, PipelineRun, Splits, StageRecord, REPORT_SCHEMA,
    REPORT_VERSION,
};
