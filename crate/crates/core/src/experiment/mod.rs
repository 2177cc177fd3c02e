//! Training loop, baselines, metrics persistence and evaluation.

pub mod config;
pub mod eval;
pub mod metrics;
pub mod studies;
pub mod train;

pub use config::{Method, SamplerConfig, TrainConfig, OUTPUT_DIR_ENV};
pub use eval::{evaluate, EvalReport, TaskEval};
pub use metrics::{MetricsRecord, RewardSummary, RunSummary};
pub use studies::{compare_methods, theorem_sweep, GridReport, GridRow, TheoremGrid, TheoremRow, TheoremSweep};
pub use train::{
    build_suite, load_checkpoints, load_suite_specs, metrics_jsonl, mix_seed, run_on_suite, run_on_tasks, run_training,
    write_run, RunOutput,
};
