//! Experiment orchestration and scoring.
//!
//! [`Evaluator`] runs the full loop for one seed (sample support, build
//! feature bundles, train the small model, render and send prompts, parse and
//! score verdicts), aggregates seeds into an [`EvaluationReport`], and runs
//! (mode × shots) ablation grids that share every per-seed artifact.

mod metrics;
mod report;
mod runner;

pub use metrics::{class_f1, compute_metrics, mean_and_std, Metrics, MetricsError};
pub use report::{
    grid_csv, ArticleRecord, CacheSummary, DatasetInfo, EvaluationReport, FailedSeed, PromptFormat, ReportError,
    SeedResult, StdKind, Summary, CSV_HEADER, REPORT_SCHEMA_VERSION,
};
pub use runner::{EvalError, Evaluator, ExperimentConfig, SeedArtifacts, TrainedModel};
