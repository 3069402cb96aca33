//! PK batch sampling and the shared head-training plumbing for the two
//! embedding networks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{EmbeddingNetwork, Matrix};

/// Draws batches of `p` classes × `k` rows each.
///
/// Classes with a single row are skipped since they cannot supply a distinct
/// positive. A class with fewer than `k` rows contributes all of them plus
/// repeats drawn at random.
#[derive(Clone, Debug)]
pub struct PkSampler {
    classes: Vec<(usize, Vec<usize>)>,
    p: usize,
    k: usize,
}

impl PkSampler {
    pub fn new(labels: &[usize], p: usize, k: usize) -> Result<Self> {
        if p < 2 || k < 2 {
            return Err(Error::Input(format!("PK sampling needs P >= 2 and K >= 2, got P={p}, K={k}")));
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        let classes: Vec<(usize, Vec<usize>)> = groups.into_iter().filter(|(_, rows)| rows.len() >= 2).collect();
        if classes.len() < 2 {
            return Err(Error::Input(format!(
                "PK sampling needs at least two classes with two or more rows, found {}",
                classes.len()
            )));
        }
        Ok(Self { classes, p, k })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn batch_size(&self) -> usize {
        self.p.min(self.classes.len()) * self.k
    }

    /// Rows of the same class as `row`, including `row` itself.
    pub fn class_rows(&self, label: usize) -> Option<&[usize]> {
        self.classes
            .iter()
            .find(|(l, _)| *l == label)
            .map(|(_, rows)| rows.as_slice())
    }

    /// Row indices of one batch, grouped by class.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let p = self.p.min(self.classes.len());
        let mut out = Vec::with_capacity(p * self.k);
        for (_, rows) in self.classes.choose_multiple(rng, p) {
            if rows.len() >= self.k {
                out.extend(rows.choose_multiple(rng, self.k));
            } else {
                let mut all = rows.clone();
                all.shuffle(rng);
                while all.len() < self.k {
                    all.push(*rows.choose(rng).expect("class has rows"));
                }
                out.extend(all);
            }
        }
        out
    }

    pub fn batches_per_epoch(&self, rows: usize) -> usize {
        rows.div_ceil(self.batch_size()).max(1)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Network to optimize and the inputs to feed it. With a frozen trunk the
/// head is trained alone on cached trunk features.
pub(crate) fn training_view(
    net: &EmbeddingNetwork,
    inputs: &[&Matrix],
    freeze_trunk: bool,
) -> Result<(EmbeddingNetwork, Vec<Matrix>)> {
    if freeze_trunk {
        let feats = inputs
            .iter()
            .map(|m| net.trunk_features(m))
            .collect::<Result<Vec<_>>>()?;
        Ok((net.head_network(), feats))
    } else {
        Ok((net.clone(), inputs.iter().map(|m| (*m).clone()).collect()))
    }
}

pub(crate) fn finish_training(net: &mut EmbeddingNetwork, work: EmbeddingNetwork, freeze_trunk: bool) -> Result<()> {
    if freeze_trunk {
        net.set_head(&work)
    } else {
        *net = work;
        Ok(())
    }
}
