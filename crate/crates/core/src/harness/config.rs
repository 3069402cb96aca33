use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analyzer::SiameseConfig;
use crate::error::{Error, Result};
use crate::losses::Margins;
use crate::numerics::ClassifierConfig;
use crate::reflector::QuadrupletConfig;
use crate::transforms::{CrashSearch, ExtremeDegrees, TransformKind};

/// IDX file locations. The in-distribution train file feeds the training and
/// validation subsets; its test file feeds the clean test subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub ood_images: PathBuf,
    pub ood_labels: PathBuf,
}

impl DataPaths {
    /// Standard file names under `in_dir` (in-distribution) and `ood_dir`.
    pub fn standard(in_dir: &Path, ood_dir: &Path) -> Self {
        Self {
            train_images: in_dir.join("train-images-idx3-ubyte"),
            train_labels: in_dir.join("train-labels-idx1-ubyte"),
            test_images: in_dir.join("t10k-images-idx3-ubyte"),
            test_labels: in_dir.join("t10k-labels-idx1-ubyte"),
            ood_images: ood_dir.join("t10k-images-idx3-ubyte"),
            ood_labels: ood_dir.join("t10k-labels-idx1-ubyte"),
        }
    }
}

impl Default for DataPaths {
    fn default() -> Self {
        Self::standard(Path::new("data/mnist"), Path::new("data/fmnist"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub ood: usize,
}

impl Default for SubsetSizes {
    fn default() -> Self {
        Self {
            train: 10_000,
            validation: 2_000,
            test: 2_000,
            ood: 2_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSettings {
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for SubjectSettings {
    fn default() -> Self {
        Self {
            hidden: vec![256, 128],
            num_classes: 10,
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSettings {
    pub head_dims: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub margins: Margins,
    pub freeze_trunk: bool,
}

impl EmbeddingSettings {
    /// The distribution network trains end to end; a frozen classifier
    /// trunk is nearly blind to mild blur.
    pub fn siamese_default() -> Self {
        Self {
            head_dims: vec![64],
            epochs: 80,
            learning_rate: 1e-3,
            margins: Margins::siamese_default(),
            freeze_trunk: false,
        }
    }

    pub fn quadruplet_default() -> Self {
        Self {
            head_dims: vec![64],
            epochs: 10,
            learning_rate: 1e-3,
            margins: Margins::quadruplet_default(),
            freeze_trunk: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchShape {
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
}

impl Default for BatchShape {
    fn default() -> Self {
        Self {
            classes_per_batch: 8,
            samples_per_class: 4,
        }
    }
}

/// Crash-search grid step per transform kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashSteps {
    pub blur: f64,
    pub bright: f64,
    pub contrast: f64,
    pub zoom: f64,
}

impl Default for CrashSteps {
    fn default() -> Self {
        Self {
            blur: 0.25,
            bright: 8.0,
            contrast: -0.05,
            zoom: 0.2,
        }
    }
}

impl CrashSteps {
    pub fn get(&self, kind: TransformKind) -> f64 {
        match kind {
            TransformKind::Blur => self.blur,
            TransformKind::Bright => self.bright,
            TransformKind::Contrast => self.contrast,
            TransformKind::Zoom => self.zoom,
        }
    }

    /// Scan over the whole legal range of `kind` with the configured step.
    /// Generated images are quantized to bytes so that persisted corpora
    /// match the in-memory ones.
    pub fn search(&self, kind: TransformKind) -> CrashSearch {
        let max = match kind {
            TransformKind::Blur => 5.0,
            TransformKind::Bright => 255.0,
            TransformKind::Contrast => 0.0,
            TransformKind::Zoom => 5.0,
        };
        CrashSearch {
            step: self.get(kind),
            max,
            quantize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataPaths,
    pub sizes: SubsetSizes,
    pub subject: SubjectSettings,
    pub siamese: EmbeddingSettings,
    pub quadruplet: EmbeddingSettings,
    pub batch: BatchShape,
    pub crash_steps: CrashSteps,
    pub extreme: ExtremeDegrees,
    /// Transform used for the deviated training and validation data.
    pub calibration_kind: TransformKind,
    pub target_tpr: f64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataPaths::default(),
            sizes: SubsetSizes::default(),
            subject: SubjectSettings::default(),
            siamese: EmbeddingSettings::siamese_default(),
            quadruplet: EmbeddingSettings::quadruplet_default(),
            batch: BatchShape::default(),
            crash_steps: CrashSteps::default(),
            extreme: ExtremeDegrees::default(),
            calibration_kind: TransformKind::Blur,
            target_tpr: 0.95,
            output_dir: PathBuf::from("artifacts"),
        }
    }
}

fn range(what: &'static str, value: f64, range: &'static str) -> Error {
    Error::Range { what, value, range }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sizes;
        if s.train < 2 || s.validation == 0 || s.test == 0 || s.ood == 0 {
            return Err(Error::Input(format!(
                "subset sizes must be positive (train >= 2), got {s:?}"
            )));
        }
        if self.subject.hidden.is_empty() || self.subject.hidden.contains(&0) || self.subject.batch_size == 0 {
            return Err(Error::Input("subject network widths and batch size must be positive".into()));
        }
        if self.subject.num_classes < 2 {
            return Err(Error::Input("need at least two classes".into()));
        }
        for (name, e) in [("siamese", &self.siamese), ("quadruplet", &self.quadruplet)] {
            if e.head_dims.is_empty() || e.head_dims.contains(&0) {
                return Err(Error::Input(format!("{name} head dims must be positive")));
            }
            if !(e.learning_rate > 0.0 && e.learning_rate.is_finite()) {
                return Err(range("learning rate", e.learning_rate, "(0, inf)"));
            }
        }
        if !(self.subject.learning_rate > 0.0 && self.subject.learning_rate.is_finite()) {
            return Err(range("learning rate", self.subject.learning_rate, "(0, inf)"));
        }
        self.siamese.margins.validate_siamese()?;
        self.quadruplet.margins.validate_quadruplet()?;
        if self.batch.classes_per_batch < 2 || self.batch.samples_per_class < 2 {
            return Err(Error::Input("batches need at least 2 classes and 2 samples per class".into()));
        }
        if !(self.target_tpr > 0.0 && self.target_tpr <= 1.0) {
            return Err(range("target tpr", self.target_tpr, "(0, 1]"));
        }
        for kind in TransformKind::ALL {
            self.crash_steps.search(kind).grid(kind)?;
            let d = self.extreme.get(kind);
            if !kind.is_legal(d) {
                return Err(range("extreme degree", d, kind.range_text()));
            }
        }
        Ok(())
    }

    /// Per-stage seeds derived from the run seed.
    pub fn stage_seed(&self, stage: u64) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage)
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            hidden: self.subject.hidden.clone(),
            num_classes: self.subject.num_classes,
            learning_rate: self.subject.learning_rate,
            batch_size: self.subject.batch_size,
            seed: self.stage_seed(1),
        }
    }

    pub fn siamese_config(&self) -> SiameseConfig {
        let e = &self.siamese;
        SiameseConfig {
            head_dims: e.head_dims.clone(),
            epochs: e.epochs,
            classes_per_batch: self.batch.classes_per_batch,
            samples_per_class: self.batch.samples_per_class,
            margins: e.margins,
            learning_rate: e.learning_rate,
            seed: self.stage_seed(2),
            freeze_trunk: e.freeze_trunk,
        }
    }

    pub fn quadruplet_config(&self) -> QuadrupletConfig {
        let e = &self.quadruplet;
        QuadrupletConfig {
            head_dims: e.head_dims.clone(),
            epochs: e.epochs,
            classes_per_batch: self.batch.classes_per_batch,
            samples_per_class: self.batch.samples_per_class,
            margins: e.margins,
            learning_rate: e.learning_rate,
            seed: self.stage_seed(3),
            freeze_trunk: e.freeze_trunk,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        cfg.save(&p).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_fields() {
        let c = RunConfig {
            target_tpr: 0.0,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.siamese.margins = Margins::new(1.0, 0.5);
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.crash_steps.contrast = 0.05;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.extreme.zoom = 7.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        fs::write(&p, "{\"seed\": 1, \"bogus\": 2}").unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn search_grids_cover_the_default_steps() {
        let s = CrashSteps::default();
        assert_eq!(s.search(TransformKind::Blur).grid(TransformKind::Blur).unwrap().len(), 20);
        assert_eq!(s.search(TransformKind::Contrast).grid(TransformKind::Contrast).unwrap().len(), 20);
        assert_eq!(s.search(TransformKind::Bright).grid(TransformKind::Bright).unwrap().len(), 32);
        assert_eq!(s.search(TransformKind::Zoom).grid(TransformKind::Zoom).unwrap().len(), 20);
    }
}
