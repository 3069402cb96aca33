//! Experiment harness: dataset loading, corpus generation, the staged
//! pipeline, the deployment guard and the evaluation report.

pub mod config;
pub mod corpora;
pub mod guard;
pub mod idx;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use guard::{Guard, GuardOutcome};
pub use idx::{load_idx, Dataset, Split};
pub use manifest::Manifest;
pub use pipeline::{run_pipeline, run_single_stage, Stage};
pub use report::{GuardReport, ReportRecord};
