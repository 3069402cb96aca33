//! Deviated (crash-degree) and extreme (out-of-distribution) corpora.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::CrashSteps;
use super::idx::{load_idx, write_idx, Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::transforms::{features_matrix, find_crash_degrees, make_extreme_with, ExtremeDegrees, Image, LabelPredictor, TransformKind};

/// Transformed images with their provenance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    /// Row of the source image in the dataset it was derived from.
    pub source_ids: Vec<usize>,
    pub kinds: Vec<TransformKind>,
    pub degrees: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaRow {
    source_id: usize,
    label: usize,
    kind: TransformKind,
    degree: f64,
}

impl CorpusSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn features(&self) -> Result<Matrix> {
        features_matrix(&self.images)
    }

    pub fn push(&mut self, image: Image, label: usize, source_id: usize, kind: TransformKind, degree: f64) {
        self.images.push(image);
        self.labels.push(label);
        self.source_ids.push(source_id);
        self.kinds.push(kind);
        self.degrees.push(degree);
    }

    pub fn extend(&mut self, other: CorpusSet) {
        self.images.extend(other.images);
        self.labels.extend(other.labels);
        self.source_ids.extend(other.source_ids);
        self.kinds.extend(other.kinds);
        self.degrees.extend(other.degrees);
    }

    /// Writes `<name>-images-idx3-ubyte`, `<name>-labels-idx1-ubyte` and
    /// `<name>.csv` (per-row provenance) into `dir`. An empty set writes only
    /// the CSV header.
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        let csv_path = dir.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&csv_path)?;
        if self.is_empty() {
            w.write_record(["source_id", "label", "kind", "degree"])?;
        }
        for i in 0..self.len() {
            w.serialize(MetaRow {
                source_id: self.source_ids[i],
                label: self.labels[i],
                kind: self.kinds[i],
                degree: self.degrees[i],
            })?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        if !self.is_empty() {
            write_idx(
                &dir.join(format!("{name}-images-idx3-ubyte")),
                &dir.join(format!("{name}-labels-idx1-ubyte")),
                &self.images,
                &self.labels,
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let csv_path = dir.join(format!("{name}.csv"));
        let mut r = csv::Reader::from_path(&csv_path).map_err(|e| Error::format(&csv_path, e.to_string()))?;
        let mut meta = Vec::new();
        for row in r.deserialize::<MetaRow>() {
            meta.push(row.map_err(|e| Error::format(&csv_path, e.to_string()))?);
        }
        if meta.is_empty() {
            return Ok(Self::default());
        }
        let ds = load_idx(
            &dir.join(format!("{name}-images-idx3-ubyte")),
            &dir.join(format!("{name}-labels-idx1-ubyte")),
            Split::Test,
        )?;
        if ds.len() != meta.len() || ds.labels.iter().zip(&meta).any(|(l, m)| *l != m.label) {
            return Err(Error::format(&csv_path, "metadata does not match the IDX files"));
        }
        Ok(Self {
            images: ds.images,
            labels: ds.labels,
            source_ids: meta.iter().map(|m| m.source_id).collect(),
            kinds: meta.iter().map(|m| m.kind).collect(),
            degrees: meta.iter().map(|m| m.degree).collect(),
        })
    }
}

/// Output of [`generate_corpora`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpora {
    pub deviated: BTreeMap<TransformKind, CorpusSet>,
    pub extreme: BTreeMap<TransformKind, CorpusSet>,
    /// Images without a crash degree, per kind.
    pub dropped: BTreeMap<TransformKind, usize>,
    /// Images left out because the classifier already mispredicts them
    /// untransformed, per kind. Only filled when
    /// [`CorpusConfig::skip_misclassified`] is set.
    pub misclassified: BTreeMap<TransformKind, usize>,
}

/// Settings for corpus generation.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub steps: CrashSteps,
    pub extreme: ExtremeDegrees,
    /// Kinds to run the crash search for.
    pub deviated_kinds: Vec<TransformKind>,
    /// Kinds to produce extreme images for.
    pub extreme_kinds: Vec<TransformKind>,
    /// Leave out images whose crash degree is the identity degree.
    pub skip_misclassified: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            steps: CrashSteps::default(),
            extreme: ExtremeDegrees::default(),
            deviated_kinds: TransformKind::ALL.to_vec(),
            extreme_kinds: TransformKind::ALL.to_vec(),
            skip_misclassified: false,
        }
    }
}

/// Runs the crash-degree search for each deviated kind (images that never
/// crash are dropped and counted) and applies every extreme kind to every
/// image. Labels are carried over from the source images; generated pixels
/// are rounded to bytes.
pub fn generate_corpora<P: LabelPredictor + Sync + ?Sized>(ds: &Dataset, clf: &P, cfg: &CorpusConfig) -> Result<Corpora> {
    let mut out = Corpora::default();
    for &kind in &cfg.deviated_kinds {
        let found = find_crash_degrees(&ds.images, &ds.labels, clf, kind, &cfg.steps.search(kind))?;
        let mut set = CorpusSet::default();
        let (mut dropped, mut misclassified) = (0, 0);
        for (i, f) in found.into_iter().enumerate() {
            match f {
                Some((degree, _)) if cfg.skip_misclassified && degree == kind.identity_degree() => misclassified += 1,
                Some((degree, img)) => set.push(img, ds.labels[i], i, kind, degree),
                None => dropped += 1,
            }
        }
        log::info!(
            "{kind}: {} deviated, {dropped} without a crash degree, {misclassified} skipped as already mispredicted",
            set.len()
        );
        out.deviated.insert(kind, set);
        out.dropped.insert(kind, dropped);
        if cfg.skip_misclassified {
            out.misclassified.insert(kind, misclassified);
        }
    }
    for &kind in &cfg.extreme_kinds {
        let degree = cfg.extreme.get(kind);
        let images = ds
            .images
            .par_iter()
            .map(|img| make_extreme_with(img, kind, &cfg.extreme).map(|x| x.quantized()))
            .collect::<Result<Vec<_>>>()?;
        let n = images.len();
        out.extreme.insert(
            kind,
            CorpusSet {
                images,
                labels: ds.labels.clone(),
                source_ids: (0..n).collect(),
                kinds: vec![kind; n],
                degrees: vec![degree; n],
            },
        );
    }
    Ok(out)
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
