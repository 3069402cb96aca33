//! Deployment-time check of single inputs against persisted artifacts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, INDEX_FILE, MANIFEST_FILE, QUADRUPLET_FILE, REFERENCE_FILE, SIAMESE_FILE, SUBJECT_FILE};
use crate::analyzer::{embed, min_distances, ReferenceSet, Thresholds, Verdict, VerdictTag};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{load_classifier, load_embedding};
use crate::numerics::{Classifier, EmbeddingNetwork};
use crate::reflector::{reflect_all, Reflection, ReflectionIndex};
use crate::transforms::{features_matrix, Image, LabelPredictor};

#[derive(Clone, Debug, PartialEq)]
pub struct Guard {
    pub subject: Classifier,
    pub siamese: EmbeddingNetwork,
    pub quadruplet: EmbeddingNetwork,
    pub reference: ReferenceSet,
    pub index: ReflectionIndex,
    pub thresholds: Thresholds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardOutcome {
    pub verdict: Verdict,
    pub subject_label: usize,
    pub reflection: Reflection,
    /// Subject prediction when in-distribution, reflected label when
    /// deviated, `None` (alarm) when out-of-distribution.
    pub final_label: Option<usize>,
}

impl GuardOutcome {
    pub fn is_alarm(&self) -> bool {
        self.verdict.tag == VerdictTag::OutOfDistribution
    }
}

fn require(dir: &Path, name: &str) -> Result<std::path::PathBuf> {
    let p = dir.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::State(format!("missing artifact {}", p.display())))
    }
}

impl Guard {
    /// Loads every artifact from a pipeline output directory.
    pub fn load(dir: &Path) -> Result<Self> {
        require(dir, MANIFEST_FILE)?;
        let manifest = Manifest::load(dir)?;
        let calibration = manifest
            .calibration
            .ok_or_else(|| Error::State("manifest has no calibrated thresholds".into()))?;
        let guard = Self {
            subject: load_classifier(&require(dir, SUBJECT_FILE)?)?,
            siamese: load_embedding(&require(dir, SIAMESE_FILE)?)?,
            quadruplet: load_embedding(&require(dir, QUADRUPLET_FILE)?)?,
            reference: ReferenceSet::load(&require(dir, REFERENCE_FILE)?)?,
            index: ReflectionIndex::load(&require(dir, INDEX_FILE)?)?,
            thresholds: calibration.thresholds()?,
        };
        guard.check_shapes()?;
        Ok(guard)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let input = self.subject.input_dim();
        if self.siamese.input_dim() != input || self.quadruplet.input_dim() != input {
            return Err(Error::State("artifact networks disagree on the input size".into()));
        }
        if self.reference.dim() != self.siamese.embedding_dim() || self.index.embeddings().cols() != self.quadruplet.embedding_dim() {
            return Err(Error::State("embedding caches do not match their networks".into()));
        }
        Ok(())
    }

    pub fn check(&self, image: &Image) -> Result<GuardOutcome> {
        Ok(self.check_batch(std::slice::from_ref(image))?.remove(0))
    }

    pub fn check_batch(&self, images: &[Image]) -> Result<Vec<GuardOutcome>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = features_matrix(images)?;
        if x.cols() != self.subject.input_dim() {
            return Err(Error::dim("guard input size", self.subject.input_dim(), x.cols()));
        }
        let subject = self.subject.predict_batch(images)?;
        let nearest = min_distances(&embed(&self.siamese, &x)?, &self.reference)?;
        let reflections = reflect_all(&embed(&self.quadruplet, &x)?, &self.index)?;
        Ok(subject
            .into_iter()
            .zip(nearest)
            .zip(reflections)
            .map(|((subject_label, (d, id)), reflection)| {
                let tag = self.thresholds.tag(d);
                let final_label = match tag {
                    VerdictTag::InDistribution => Some(subject_label),
                    VerdictTag::Deviated => Some(reflection.label),
                    VerdictTag::OutOfDistribution => None,
                };
                GuardOutcome {
                    verdict: Verdict {
                        tag,
                        min_distance: d,
                        nearest_id: id,
                    },
                    subject_label,
                    reflection,
                    final_label,
                }
            })
            .collect())
    }
}
