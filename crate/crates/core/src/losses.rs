//! Squared-Euclidean distances and the margin losses used to train the
//! embedding networks: triplet, tri-margin Siamese and batch-hard quadruplet.
//!
//! Every hinge `max(arg, 0)` contributes a zero gradient when `arg <= 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{squared_distance, EmbeddingNetwork, Gradients, Matrix, Trainable};

/// Pairwise squared Euclidean distances of a batch of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    d2: Matrix,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.d2.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d2.get(i, j)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.d2
    }
}

pub fn pairwise_sq_distances(embeddings: &Matrix) -> DistanceMatrix {
    let n = embeddings.rows();
    let mut d2 = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = squared_distance(embeddings.row(i), embeddings.row(j));
            d2.set(i, j, d);
            d2.set(j, i, d);
        }
    }
    DistanceMatrix { d2 }
}

/// `max(d_ap - d_an + alpha, 0)`.
pub fn triplet_loss(d_ap: f64, d_an: f64, alpha: f64) -> f64 {
    (d_ap - d_an + alpha).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub m1: f64,
    pub m2: f64,
}

impl Margins {
    pub fn new(m1: f64, m2: f64) -> Self {
        Self { m1, m2 }
    }

    pub fn siamese_default() -> Self {
        Self { m1: 0.2, m2: 1.0 }
    }

    pub fn quadruplet_default() -> Self {
        Self { m1: 1.0, m2: 0.5 }
    }

    /// Positive margins with `m1 < m2`.
    pub fn validate_siamese(&self) -> Result<()> {
        if !(self.m1 > 0.0 && self.m2 > 0.0 && self.m1 < self.m2) {
            return Err(Error::Input(format!(
                "siamese margins need 0 < m1 < m2, got ({}, {})",
                self.m1, self.m2
            )));
        }
        Ok(())
    }

    /// Positive margins with `m1 > m2`.
    pub fn validate_quadruplet(&self) -> Result<()> {
        if !(self.m1 > 0.0 && self.m2 > 0.0 && self.m1 > self.m2) {
            return Err(Error::Input(format!(
                "quadruplet margins need m1 > m2 > 0, got ({}, {})",
                self.m1, self.m2
            )));
        }
        Ok(())
    }
}

/// Row-aligned inputs for the tri-margin loss: row `k` of every block shares
/// `labels[k]`; `deviated` and `extreme` are transformed versions of the
/// anchor row, `partners` a different instance of the same class.
#[derive(Clone, Debug)]
pub struct SiameseBatch {
    pub anchors: Matrix,
    pub partners: Matrix,
    pub deviated: Matrix,
    pub extreme: Matrix,
    pub labels: Vec<usize>,
}

impl SiameseBatch {
    pub fn new(
        anchors: Matrix,
        partners: Matrix,
        deviated: Matrix,
        extreme: Matrix,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let batch = Self {
            anchors,
            partners,
            deviated,
            extreme,
            labels,
        };
        batch.check()?;
        Ok(batch)
    }

    fn check(&self) -> Result<()> {
        let n = self.anchors.rows();
        for (name, m) in [
            ("partners", &self.partners),
            ("deviated", &self.deviated),
            ("extreme", &self.extreme),
        ] {
            if m.shape() != self.anchors.shape() {
                return Err(Error::Input(format!(
                    "siamese batch misaligned: {name} is {:?}, anchors are {:?}",
                    m.shape(),
                    self.anchors.shape()
                )));
            }
        }
        if self.labels.len() != n {
            return Err(Error::Input(format!(
                "siamese batch misaligned: {} labels for {n} rows",
                self.labels.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.anchors.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Per-row tri-margin loss from the three distances `f(x_ci, x_cj)`,
/// `f(x_ci, x')` and `f(x_ci, x'')`.
pub fn trimargin_terms(f_pair: f64, f_dev: f64, f_ext: f64, margins: Margins) -> f64 {
    (f_pair - f_dev + margins.m1).max(0.0)
        + (f_dev - f_pair - margins.m2).max(0.0)
        + (f_pair - f_ext + margins.m2).max(0.0)
}

/// Hinge arguments of the three tri-margin terms, for kink detection.
pub fn trimargin_arguments(f_pair: f64, f_dev: f64, f_ext: f64, margins: Margins) -> [f64; 3] {
    [
        f_pair - f_dev + margins.m1,
        f_dev - f_pair - margins.m2,
        f_pair - f_ext + margins.m2,
    ]
}

/// Gradients of the tri-margin loss w.r.t. each embedding block.
#[derive(Clone, Debug)]
pub struct TrimarginGrads {
    pub anchors: Matrix,
    pub partners: Matrix,
    pub deviated: Matrix,
    pub extreme: Matrix,
}

/// Mean tri-margin loss over rows of already-embedded blocks.
pub fn trimargin_loss_embeddings(
    anchors: &Matrix,
    partners: &Matrix,
    deviated: &Matrix,
    extreme: &Matrix,
    margins: Margins,
) -> Result<(f64, TrimarginGrads)> {
    let shape = anchors.shape();
    for m in [partners, deviated, extreme] {
        if m.shape() != shape {
            return Err(Error::Input(format!(
                "embedding blocks misaligned: {:?} vs {:?}",
                m.shape(),
                shape
            )));
        }
    }
    let (rows, dim) = shape;
    let scale = 1.0 / rows as f64;
    let mut ga = Matrix::zeros(rows, dim);
    let mut gp = Matrix::zeros(rows, dim);
    let mut gd = Matrix::zeros(rows, dim);
    let mut ge = Matrix::zeros(rows, dim);
    let mut total = 0.0;
    for r in 0..rows {
        let a = anchors.row(r);
        let p = partners.row(r);
        let d = deviated.row(r);
        let e = extreme.row(r);
        let f_pair = squared_distance(a, p);
        let f_dev = squared_distance(a, d);
        let f_ext = squared_distance(a, e);
        total += trimargin_terms(f_pair, f_dev, f_ext, margins);

        // Coefficients of each distance in the active hinge terms.
        let [h1, h2, h3] = trimargin_arguments(f_pair, f_dev, f_ext, margins);
        let (mut c_pair, mut c_dev, mut c_ext) = (0.0, 0.0, 0.0);
        if h1 > 0.0 {
            c_pair += 1.0;
            c_dev -= 1.0;
        }
        if h2 > 0.0 {
            c_dev += 1.0;
            c_pair -= 1.0;
        }
        if h3 > 0.0 {
            c_pair += 1.0;
            c_ext -= 1.0;
        }
        for k in 0..dim {
            let dp = 2.0 * (a[k] - p[k]) * c_pair * scale;
            let dd = 2.0 * (a[k] - d[k]) * c_dev * scale;
            let de = 2.0 * (a[k] - e[k]) * c_ext * scale;
            ga.set(r, k, dp + dd + de);
            gp.set(r, k, -dp);
            gd.set(r, k, -dd);
            ge.set(r, k, -de);
        }
    }
    Ok((
        total * scale,
        TrimarginGrads {
            anchors: ga,
            partners: gp,
            deviated: gd,
            extreme: ge,
        },
    ))
}

/// Tri-margin loss of `batch` under `net`, with parameter gradients. The four
/// blocks pass through the same (shared-weight) network.
pub fn siamese_trimargin_loss(
    batch: &SiameseBatch,
    net: &EmbeddingNetwork,
    margins: Margins,
    trainable: Trainable,
) -> Result<(f64, Gradients)> {
    batch.check()?;
    let n = batch.len();
    let stacked = Matrix::vstack(&[&batch.anchors, &batch.partners, &batch.deviated, &batch.extreme])?;
    let trace = net.trace(&stacked)?;
    let emb = trace.output();
    let (loss, g) = trimargin_loss_embeddings(
        &emb.slice_rows(0, n),
        &emb.slice_rows(n, 2 * n),
        &emb.slice_rows(2 * n, 3 * n),
        &emb.slice_rows(3 * n, 4 * n),
        margins,
    )?;
    let upstream = Matrix::vstack(&[&g.anchors, &g.partners, &g.deviated, &g.extreme])?;
    let grads = net.backward_trace(&trace, &upstream, trainable)?;
    Ok((loss, grads))
}

/// Hardest positive and negative per anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct HardMining {
    pub hard_pos: Vec<f64>,
    pub hard_pos_idx: Vec<usize>,
    pub hard_neg: Vec<f64>,
    pub hard_neg_idx: Vec<usize>,
}

/// For every anchor: the farthest distinct same-label sample and the nearest
/// different-label sample. Ties resolve to the lowest index.
pub fn mine_batch_hard(d: &DistanceMatrix, labels: &[usize]) -> Result<HardMining> {
    let n = d.len();
    if labels.len() != n {
        return Err(Error::dim("mining labels", n, labels.len()));
    }
    let mut out = HardMining {
        hard_pos: Vec::with_capacity(n),
        hard_pos_idx: Vec::with_capacity(n),
        hard_neg: Vec::with_capacity(n),
        hard_neg_idx: Vec::with_capacity(n),
    };
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let dist = d.get(a, j);
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| dist > best) {
                    pos = Some((j, dist));
                }
            } else if neg.is_none_or(|(_, best)| dist < best) {
                neg = Some((j, dist));
            }
        }
        let (pi, pd) = pos.ok_or(Error::Mining {
            anchor: a,
            missing: "positive",
        })?;
        let (ni, nd) = neg.ok_or(Error::Mining {
            anchor: a,
            missing: "negative",
        })?;
        out.hard_pos.push(pd);
        out.hard_pos_idx.push(pi);
        out.hard_neg.push(nd);
        out.hard_neg_idx.push(ni);
    }
    Ok(out)
}

/// Per anchor, the closest pair `(p, n)` whose labels differ from each other
/// and from the anchor's label. `None` for every anchor when the batch has
/// fewer than three distinct labels.
pub fn mine_negative_pairs(d: &DistanceMatrix, labels: &[usize]) -> Vec<Option<(usize, usize, f64)>> {
    let n = d.len();
    (0..n)
        .map(|a| {
            let mut best: Option<(usize, usize, f64)> = None;
            for p in 0..n {
                if labels[p] == labels[a] {
                    continue;
                }
                for q in 0..n {
                    if labels[q] == labels[a] || labels[q] == labels[p] {
                        continue;
                    }
                    let dist = d.get(p, q);
                    if best.is_none_or(|(_, _, b)| dist < b) {
                        best = Some((p, q, dist));
                    }
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct QuadrupletLoss {
    pub loss: f64,
    pub loss_an: f64,
    pub loss_nn: f64,
    /// Gradient of `loss` w.r.t. the embeddings.
    pub gradient: Matrix,
}

/// Batch-hard quadruplet loss `loss_an + loss_nn` with its gradient.
pub fn quadruplet_loss(embeddings: &Matrix, labels: &[usize], margins: Margins) -> Result<QuadrupletLoss> {
    let n = embeddings.rows();
    let d = pairwise_sq_distances(embeddings);
    let hard = mine_batch_hard(&d, labels)?;
    let pairs = mine_negative_pairs(&d, labels);
    let scale = 1.0 / n as f64;

    // coeff[i][j]: d(loss)/d(d_ij), accumulated over the active hinges.
    let mut coeff = Matrix::zeros(n, n);
    let mut loss_an = 0.0;
    let mut loss_nn = 0.0;
    for (a, pair) in pairs.iter().enumerate() {
        let arg = hard.hard_pos[a] - hard.hard_neg[a] + margins.m1;
        if arg > 0.0 {
            loss_an += arg;
            bump(&mut coeff, a, hard.hard_pos_idx[a], scale);
            bump(&mut coeff, a, hard.hard_neg_idx[a], -scale);
        }
        if let Some((p, q, dnn)) = *pair {
            let arg = hard.hard_pos[a] - dnn + margins.m2;
            if arg > 0.0 {
                loss_nn += arg;
                bump(&mut coeff, a, hard.hard_pos_idx[a], scale);
                bump(&mut coeff, p, q, -scale);
            }
        }
    }
    loss_an *= scale;
    loss_nn *= scale;

    let dim = embeddings.cols();
    let mut gradient = Matrix::zeros(n, dim);
    for i in 0..n {
        for j in 0..n {
            let c = coeff.get(i, j);
            if c == 0.0 {
                continue;
            }
            // d(||e_i - e_j||²)/de_i = 2(e_i - e_j), and the negation for e_j.
            for k in 0..dim {
                let diff = 2.0 * c * (embeddings.get(i, k) - embeddings.get(j, k));
                gradient.row_mut(i)[k] += diff;
                gradient.row_mut(j)[k] -= diff;
            }
        }
    }
    Ok(QuadrupletLoss {
        loss: loss_an + loss_nn,
        loss_an,
        loss_nn,
        gradient,
    })
}

fn bump(coeff: &mut Matrix, i: usize, j: usize, v: f64) {
    let cur = coeff.get(i, j);
    coeff.set(i, j, cur + v);
}

/// Quadruplet loss of `batch` under `net`, with parameter gradients.
pub fn quadruplet_loss_network(
    batch: &Matrix,
    labels: &[usize],
    net: &EmbeddingNetwork,
    margins: Margins,
    trainable: Trainable,
) -> Result<(QuadrupletLoss, Gradients)> {
    let trace = net.trace(batch)?;
    let q = quadruplet_loss(trace.output(), labels, margins)?;
    let grads = net.backward_trace(&trace, &q.gradient, trainable)?;
    Ok((q, grads))
}
