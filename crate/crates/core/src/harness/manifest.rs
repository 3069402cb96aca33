use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::report::Aggregates;
use crate::analyzer::Calibration;
use crate::error::{Error, Result};
use crate::sampling::TrainingReport;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUBJECT_FILE: &str = "subject.model.json";
pub const SIAMESE_FILE: &str = "siamese.model.json";
pub const QUADRUPLET_FILE: &str = "quadruplet.model.json";
pub const REFERENCE_FILE: &str = "reference.rflx";
pub const INDEX_FILE: &str = "index.rflx";
pub const REPORT_FILE: &str = "report.csv";
pub const CORPORA_DIR: &str = "corpora";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    /// Row count per corpus name.
    pub sizes: BTreeMap<String, usize>,
    /// Source images without a crash degree per corpus name; `/misclassified`
    /// keys count images skipped because the original is already mispredicted.
    pub dropped: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub status: RunStatus,
    pub config: RunConfig,
    pub stages: Vec<StageRecord>,
    #[serde(default)]
    pub failed_stage: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub subject: Option<SubjectSummary>,
    #[serde(default)]
    pub corpora: Option<CorpusSummary>,
    #[serde(default)]
    pub siamese: Option<TrainingReport>,
    #[serde(default)]
    pub quadruplet: Option<TrainingReport>,
    #[serde(default)]
    pub calibration: Option<Calibration>,
    #[serde(default)]
    pub metrics: Option<Aggregates>,
}

impl Manifest {
    pub fn new(config: RunConfig) -> Self {
        Self {
            format_version: 1,
            status: RunStatus::Running,
            config,
            stages: Vec::new(),
            failed_stage: None,
            error: None,
            subject: None,
            corpora: None,
            siamese: None,
            quadruplet: None,
            calibration: None,
            metrics: None,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    /// Loads the manifest in `dir`, or starts a new one for `config`.
    pub fn load_or_new(dir: &Path, config: &RunConfig) -> Result<Self> {
        if dir.join(MANIFEST_FILE).exists() {
            let mut m = Self::load(dir)?;
            m.config = config.clone();
            Ok(m)
        } else {
            Ok(Self::new(config.clone()))
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    pub fn record_stage(&mut self, stage: &str, seconds: f64) {
        self.stages.retain(|s| s.stage != stage);
        self.stages.push(StageRecord {
            stage: stage.to_string(),
            seconds,
        });
    }
}
