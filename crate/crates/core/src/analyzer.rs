//! Distribution analysis: a Siamese embedding trained with the tri-margin
//! loss, minimum distances to the embedded training set, threshold
//! calibration and the three-way verdict.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{siamese_trimargin_loss, Margins, SiameseBatch};
use crate::metrics::{auroc, tpr_threshold, ScoreSet};
use crate::numerics::optimizer::layer_slots;
use crate::numerics::{optimizer_step, squared_distance, DenseLayer, EmbeddingNetwork, Matrix, OptimizerState, Trainable};
use crate::sampling::{finish_training, training_view, PkSampler, TrainingReport};

/// Embedded training set that deployment inputs are compared against.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSet {
    embeddings: Matrix,
    source_ids: Vec<usize>,
}

impl ReferenceSet {
    pub fn new(embeddings: Matrix, source_ids: Vec<usize>) -> Result<Self> {
        if source_ids.len() != embeddings.rows() {
            return Err(Error::dim("reference source ids", embeddings.rows(), source_ids.len()));
        }
        Ok(Self { embeddings, source_ids })
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn source_ids(&self) -> &[usize] {
        &self.source_ids
    }

    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::rflx::write_rflx(path, &self.embeddings, &self.source_ids)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (embeddings, ids) = crate::rflx::read_rflx(path)?;
        Self::new(embeddings, ids).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Embeds every training row; row `i` gets source id `i`.
pub fn build_reference(net: &EmbeddingNetwork, train: &Matrix) -> Result<ReferenceSet> {
    let embeddings = embed(net, train)?;
    let ids = (0..embeddings.rows()).collect();
    ReferenceSet::new(embeddings, ids)
}

/// Forward pass in fixed-size chunks to bound memory.
pub fn embed(net: &EmbeddingNetwork, data: &Matrix) -> Result<Matrix> {
    const CHUNK: usize = 2048;
    if data.rows() <= CHUNK {
        return net.forward(data);
    }
    let parts = (0..data.rows())
        .step_by(CHUNK)
        .map(|s| net.forward(&data.slice_rows(s, (s + CHUNK).min(data.rows()))))
        .collect::<Result<Vec<_>>>()?;
    Matrix::vstack(&parts.iter().collect::<Vec<_>>())
}

/// Exact minimum squared distance from `x` to the reference rows and the
/// source id that attains it. Ties go to the lowest source id.
pub fn min_distance(x: &[f64], reference: &ReferenceSet) -> Result<(f64, usize)> {
    if reference.is_empty() {
        return Err(Error::State("reference set is empty".into()));
    }
    if x.len() != reference.dim() {
        return Err(Error::dim("min-distance query", reference.dim(), x.len()));
    }
    let mut best = (f64::INFINITY, usize::MAX);
    for (row, &id) in reference.embeddings.iter_rows().zip(&reference.source_ids) {
        let d = squared_distance(row, x);
        if d < best.0 || (d == best.0 && id < best.1) {
            best = (d, id);
        }
    }
    Ok(best)
}

/// [`min_distance`] for every row of `queries`, scanned in parallel.
pub fn min_distances(queries: &Matrix, reference: &ReferenceSet) -> Result<Vec<(f64, usize)>> {
    (0..queries.rows())
        .into_par_iter()
        .map(|i| min_distance(queries.row(i), reference))
        .collect()
}

/// Distance thresholds: below `k_in` is in-distribution, above `k_out` is
/// out-of-distribution, anything in between is deviated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub k_in: f64,
    pub k_out: f64,
}

impl Thresholds {
    pub fn new(k_in: f64, k_out: f64) -> Result<Self> {
        if !(k_in.is_finite() && k_out.is_finite() && 0.0 <= k_in && k_in < k_out) {
            return Err(Error::Input(format!(
                "thresholds need 0 <= k_in < k_out, got k_in={k_in}, k_out={k_out}"
            )));
        }
        Ok(Self { k_in, k_out })
    }

    /// Equality with either threshold falls in the deviated band.
    pub fn tag(&self, min_distance: f64) -> VerdictTag {
        if min_distance < self.k_in {
            VerdictTag::InDistribution
        } else if min_distance > self.k_out {
            VerdictTag::OutOfDistribution
        } else {
            VerdictTag::Deviated
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VerdictTag {
    #[serde(rename = "in")]
    InDistribution,
    #[serde(rename = "deviated")]
    Deviated,
    #[serde(rename = "ood")]
    OutOfDistribution,
}

impl VerdictTag {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictTag::InDistribution => "in",
            VerdictTag::Deviated => "deviated",
            VerdictTag::OutOfDistribution => "ood",
        }
    }
}

impl std::str::FromStr for VerdictTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in" => Ok(VerdictTag::InDistribution),
            "deviated" => Ok(VerdictTag::Deviated),
            "ood" => Ok(VerdictTag::OutOfDistribution),
            other => Err(Error::Input(format!("unknown verdict {other:?}"))),
        }
    }
}

impl std::fmt::Display for VerdictTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub tag: VerdictTag,
    pub min_distance: f64,
    pub nearest_id: usize,
}

pub fn classify(x: &[f64], reference: &ReferenceSet, th: &Thresholds) -> Result<Verdict> {
    let (d, id) = min_distance(x, reference)?;
    Ok(Verdict {
        tag: th.tag(d),
        min_distance: d,
        nearest_id: id,
    })
}

/// Linear-interpolation quantile of `sorted` (ascending) at `q ∈ [0, 1]`.
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        f64::NAN
    } else {
        quantile(&s, 0.5)
    }
}

/// Thresholds together with the data they were fitted on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub k_in: f64,
    pub k_out: f64,
    pub target_tpr: f64,
    pub in_count: usize,
    pub dev_count: usize,
}

impl Calibration {
    pub fn thresholds(&self) -> Result<Thresholds> {
        Thresholds::new(self.k_in, self.k_out)
    }
}

/// Fits `(k_in, k_out)` from validation min-distances.
///
/// `k_in` is the largest threshold that still puts at least `target_tpr` of
/// the deviated distances at or above it, capped just above the 99th
/// percentile of the in-distribution distances. `k_out` sits just above the
/// 99.5th percentile of the deviated distances, moved past `k_in` if needed.
/// Fails when the deviated distances are not larger than the
/// in-distribution ones on average (AUROC ≤ 0.5).
pub fn calibrate(in_val: &[f64], dev_val: &[f64], target_tpr: f64) -> Result<Thresholds> {
    calibrate_full(in_val, dev_val, target_tpr)?.thresholds()
}

pub fn calibrate_full(in_val: &[f64], dev_val: &[f64], target_tpr: f64) -> Result<Calibration> {
    let fail = |reason: String| Error::Calibration {
        reason,
        in_count: in_val.len(),
        in_median: median(in_val),
        dev_count: dev_val.len(),
        dev_median: median(dev_val),
    };
    if in_val.is_empty() || dev_val.is_empty() {
        return Err(fail("both distance lists must be non-empty".into()));
    }
    if in_val.iter().chain(dev_val).any(|d| !d.is_finite() || *d < 0.0) {
        return Err(fail("distances must be finite and nonnegative".into()));
    }
    let separation = auroc(&ScoreSet::new(dev_val.to_vec(), in_val.to_vec()))?;
    if separation <= 0.5 {
        return Err(fail(format!(
            "deviated distances do not exceed in-distribution distances (AUROC {separation:.4})"
        )));
    }
    let mut in_sorted = in_val.to_vec();
    in_sorted.sort_by(f64::total_cmp);
    let mut dev_sorted = dev_val.to_vec();
    dev_sorted.sort_by(f64::total_cmp);

    let recall_cut = tpr_threshold(dev_val, target_tpr)?;
    let in_cap = quantile(&in_sorted, 0.99).next_up();
    let k_in = recall_cut.min(in_cap);
    let mut k_out = quantile(&dev_sorted, 0.995).next_up();
    if k_out <= k_in {
        k_out = k_in.next_up();
    }
    if !(k_in < k_out && k_out.is_finite()) {
        return Err(fail(format!("could not order thresholds (k_in {k_in}, k_out {k_out})")));
    }
    Ok(Calibration {
        k_in,
        k_out,
        target_tpr,
        in_count: in_val.len(),
        dev_count: dev_val.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiameseConfig {
    pub head_dims: Vec<usize>,
    pub epochs: usize,
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub margins: Margins,
    pub learning_rate: f64,
    pub seed: u64,
    pub freeze_trunk: bool,
}

impl Default for SiameseConfig {
    fn default() -> Self {
        Self {
            head_dims: vec![64],
            epochs: 10,
            classes_per_batch: 8,
            samples_per_class: 4,
            margins: Margins::siamese_default(),
            learning_rate: 1e-3,
            seed: 0,
            freeze_trunk: true,
        }
    }
}

/// Row-aligned training inputs: `deviated[i]` and `extreme[i]` are
/// transformed versions of `train[i]`.
#[derive(Clone, Copy, Debug)]
pub struct SiameseData<'a> {
    pub train: &'a Matrix,
    pub labels: &'a [usize],
    pub deviated: &'a Matrix,
    pub extreme: &'a Matrix,
}

impl SiameseData<'_> {
    fn check(&self) -> Result<()> {
        let n = self.train.rows();
        if self.labels.len() != n || self.deviated.rows() != n || self.extreme.rows() != n {
            return Err(Error::Input(format!(
                "siamese inputs misaligned: train {n}, labels {}, deviated {}, extreme {}",
                self.labels.len(),
                self.deviated.rows(),
                self.extreme.rows()
            )));
        }
        if self.deviated.cols() != self.train.cols() || self.extreme.cols() != self.train.cols() {
            return Err(Error::Input("siamese inputs differ in feature width".into()));
        }
        Ok(())
    }
}

/// Trains a Siamese embedding with the tri-margin loss. The anchor partner
/// for each row is another training row of the same class.
pub fn train_siamese(
    trunk: &[DenseLayer],
    data: SiameseData<'_>,
    config: &SiameseConfig,
) -> Result<(EmbeddingNetwork, TrainingReport)> {
    data.check()?;
    config.margins.validate_siamese()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = EmbeddingNetwork::with_new_head(trunk, data.train.cols(), &config.head_dims, &mut rng)?;
    let sampler = PkSampler::new(data.labels, config.classes_per_batch, config.samples_per_class)?;
    let (mut work, inputs) = training_view(&net, &[data.train, data.deviated, data.extreme], config.freeze_trunk)?;
    let (x, x_dev, x_ext) = (&inputs[0], &inputs[1], &inputs[2]);
    let mut opt = OptimizerState::adam(config.learning_rate)?;

    let batches = sampler.batches_per_epoch(data.train.rows());
    let mut report = TrainingReport::default();
    for _ in 0..config.epochs {
        let mut total = 0.0;
        for _ in 0..batches {
            let rows = sampler.sample(&mut rng);
            let labels: Vec<usize> = rows.iter().map(|&r| data.labels[r]).collect();
            let partners: Vec<usize> = rows
                .iter()
                .zip(&labels)
                .map(|(&r, &l)| {
                    let same = sampler.class_rows(l).expect("sampled class exists");
                    loop {
                        let j = *same.choose(&mut rng).expect("class has rows");
                        if j != r {
                            break j;
                        }
                    }
                })
                .collect();
            let batch = SiameseBatch::new(
                x.select_rows(&rows)?,
                x.select_rows(&partners)?,
                x_dev.select_rows(&rows)?,
                x_ext.select_rows(&rows)?,
                labels,
            )?;
            let (loss, grads) = siamese_trimargin_loss(&batch, &work, config.margins, Trainable::All)?;
            total += loss;
            let mut slots = layer_slots("siamese", work.layers_mut(), &grads);
            optimizer_step(&mut slots, &mut opt)?;
        }
        let mean = total / batches as f64;
        log::debug!("siamese epoch {}: loss {mean:.5}", report.epoch_losses.len() + 1);
        report.epoch_losses.push(mean);
    }
    finish_training(&mut net, work, config.freeze_trunk)?;
    Ok((net, report))
}

/// Mean squared distance between the embeddings of aligned rows of `a` and
/// `b`.
pub fn mean_aligned_distance(net: &EmbeddingNetwork, a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("aligned distance", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let (ea, eb) = (embed(net, a)?, embed(net, b)?);
    let total: f64 = ea.iter_rows().zip(eb.iter_rows()).map(|(x, y)| squared_distance(x, y)).sum();
    Ok(total / a.rows() as f64)
}
