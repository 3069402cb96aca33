//! Detection and classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores for a detection task; higher means "more positive".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

impl ScoreSet {
    pub fn new(positives: Vec<f64>, negatives: Vec<f64>) -> Self {
        Self { positives, negatives }
    }

    fn check(&self) -> Result<()> {
        if self.positives.is_empty() || self.negatives.is_empty() {
            return Err(Error::Input(format!(
                "score set needs both sides non-empty (positives {}, negatives {})",
                self.positives.len(),
                self.negatives.len()
            )));
        }
        if self.positives.iter().chain(&self.negatives).any(|s| !s.is_finite()) {
            return Err(Error::Input("score set contains a non-finite score".into()));
        }
        Ok(())
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Area under the ROC curve as the pair-counting estimator
/// `(#[p > n] + ½·#[p = n]) / (|P|·|N|)`.
///
/// Counts are accumulated as integers so the result matches an exhaustive
/// pair count exactly.
pub fn auroc(s: &ScoreSet) -> Result<f64> {
    s.check()?;
    let neg = sorted(&s.negatives);
    // Twice the statistic: 2 per strictly-greater pair, 1 per tie.
    let mut twice: u128 = 0;
    for &p in &s.positives {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        twice += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs = s.positives.len() as u128 * s.negatives.len() as u128;
    Ok(twice as f64 / (2 * pairs) as f64)
}

/// Largest threshold `t` such that at least `tpr` of the scores are `≥ t`.
pub(crate) fn tpr_threshold(scores: &[f64], tpr: f64) -> Result<f64> {
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::Range {
            what: "target tpr",
            value: tpr,
            range: "(0, 1]",
        });
    }
    if scores.is_empty() {
        return Err(Error::Input("no scores to threshold".into()));
    }
    let s = sorted(scores);
    let n = s.len();
    // Minimum number of scores that must be ≥ t. The small slack keeps
    // products such as 0.95·20 from rounding up to 20.
    let m = ((tpr * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    Ok(s[n - m])
}

/// True-negative rate at the largest threshold that keeps the true-positive
/// rate at or above `tpr`. Positives pass with `≥ t`, negatives are rejected
/// with `< t`.
pub fn tnr_at_tpr(s: &ScoreSet, tpr: f64) -> Result<f64> {
    s.check()?;
    let t = tpr_threshold(&s.positives, tpr)?;
    let rejected = s.negatives.iter().filter(|&&n| n < t).count();
    Ok(rejected as f64 / s.negatives.len() as f64)
}

pub fn accuracy<T: PartialEq>(predictions: &[T], truths: &[T]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::Input(format!(
            "accuracy needs equal lengths, got {} predictions and {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Input("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}
