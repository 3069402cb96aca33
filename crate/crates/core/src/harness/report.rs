//! Per-input evaluation records and the aggregates derived from them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analyzer::VerdictTag;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auroc, tnr_at_tpr, ScoreSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Clean,
    Deviated,
    Ood,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub input_id: usize,
    pub group: Group,
    /// `clean`, a transform name, or `other-dataset`.
    pub source: String,
    /// Row of the seeded evaluation subset the input derives from.
    pub source_index: usize,
    pub true_label: usize,
    pub subject_label: usize,
    pub verdict: VerdictTag,
    pub min_distance: f64,
    pub nearest_train_id: usize,
    pub reflected_label: usize,
    pub reflection_distance: f64,
    /// Empty for out-of-distribution alarms.
    pub final_label: Option<usize>,
}

impl ReportRecord {
    fn final_correct(&self) -> bool {
        self.final_label == Some(self.true_label)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub in_distribution: usize,
    pub deviated: usize,
    pub out_of_distribution: usize,
}

impl VerdictCounts {
    fn add(&mut self, v: VerdictTag) {
        match v {
            VerdictTag::InDistribution => self.in_distribution += 1,
            VerdictTag::Deviated => self.deviated += 1,
            VerdictTag::OutOfDistribution => self.out_of_distribution += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.in_distribution + self.deviated + self.out_of_distribution
    }
}

/// Accuracies and verdict mix for one slice of the records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceStats {
    pub count: usize,
    pub verdicts: VerdictCounts,
    pub subject_accuracy: Option<f64>,
    pub reflection_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
}

fn slice_stats<'a>(records: impl Iterator<Item = &'a ReportRecord>) -> Result<SliceStats> {
    let rs: Vec<&ReportRecord> = records.collect();
    let mut s = SliceStats {
        count: rs.len(),
        ..SliceStats::default()
    };
    for r in &rs {
        s.verdicts.add(r.verdict);
    }
    if !rs.is_empty() {
        let truth: Vec<usize> = rs.iter().map(|r| r.true_label).collect();
        let subject: Vec<usize> = rs.iter().map(|r| r.subject_label).collect();
        let reflected: Vec<usize> = rs.iter().map(|r| r.reflected_label).collect();
        s.subject_accuracy = Some(accuracy(&subject, &truth)?);
        s.reflection_accuracy = Some(accuracy(&reflected, &truth)?);
        s.final_accuracy = Some(rs.iter().filter(|r| r.final_correct()).count() as f64 / rs.len() as f64);
    }
    Ok(s)
}

fn fraction<'a>(records: impl Iterator<Item = &'a ReportRecord>, pred: impl Fn(&ReportRecord) -> bool) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for r in records {
        n += 1;
        hit += usize::from(pred(r));
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

/// Detection scores: the min-distance of each record, positives first.
fn detection(records: &[ReportRecord], positive: impl Fn(Group) -> bool, negative: impl Fn(Group) -> bool) -> ScoreSet {
    ScoreSet::new(
        records.iter().filter(|r| positive(r.group)).map(|r| r.min_distance).collect(),
        records.iter().filter(|r| negative(r.group)).map(|r| r.min_distance).collect(),
    )
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub total: usize,
    pub verdicts: VerdictCounts,
    pub clean: SliceStats,
    pub deviated: SliceStats,
    pub ood: SliceStats,
    /// Clean and deviated inputs together.
    pub mixed: SliceStats,
    /// Per `source` value.
    pub by_source: BTreeMap<String, SliceStats>,
    /// Min-distance AUROC, deviated (positive) vs clean.
    pub auroc_deviated_vs_in: Option<f64>,
    pub tnr95_deviated_vs_in: Option<f64>,
    /// Min-distance AUROC, out-of-distribution (positive) vs clean and deviated.
    pub auroc_ood_vs_rest: Option<f64>,
    pub tnr95_ood_vs_rest: Option<f64>,
    /// Deviated inputs not accepted as in-distribution (`d ≥ k_in`).
    pub deviated_flag_rate: Option<f64>,
    /// Deviated inputs whose verdict is exactly `deviated`.
    pub deviated_exact_rate: Option<f64>,
    /// Out-of-distribution inputs raising the alarm.
    pub ood_alarm_rate: Option<f64>,
    /// Out-of-distribution inputs whose verdict is `deviated`.
    pub ood_deviated_flag_rate: Option<f64>,
}

pub fn aggregate(records: &[ReportRecord]) -> Result<Aggregates> {
    let of = |g: Group| records.iter().filter(move |r| r.group == g);
    let mut verdicts = VerdictCounts::default();
    for r in records {
        verdicts.add(r.verdict);
    }
    let mut sources: Vec<&str> = records.iter().map(|r| r.source.as_str()).collect();
    sources.sort_unstable();
    sources.dedup();
    let mut by_source = BTreeMap::new();
    for s in sources {
        by_source.insert(s.to_string(), slice_stats(records.iter().filter(|r| r.source == s))?);
    }

    let dev_in = detection(records, |g| g == Group::Deviated, |g| g == Group::Clean);
    let ood_rest = detection(records, |g| g == Group::Ood, |g| g != Group::Ood);
    let scored = |s: &ScoreSet| !s.positives.is_empty() && !s.negatives.is_empty();
    Ok(Aggregates {
        total: records.len(),
        verdicts,
        clean: slice_stats(of(Group::Clean))?,
        deviated: slice_stats(of(Group::Deviated))?,
        ood: slice_stats(of(Group::Ood))?,
        mixed: slice_stats(records.iter().filter(|r| r.group != Group::Ood))?,
        by_source,
        auroc_deviated_vs_in: scored(&dev_in).then(|| auroc(&dev_in)).transpose()?,
        tnr95_deviated_vs_in: scored(&dev_in).then(|| tnr_at_tpr(&dev_in, 0.95)).transpose()?,
        auroc_ood_vs_rest: scored(&ood_rest).then(|| auroc(&ood_rest)).transpose()?,
        tnr95_ood_vs_rest: scored(&ood_rest).then(|| tnr_at_tpr(&ood_rest, 0.95)).transpose()?,
        deviated_flag_rate: fraction(of(Group::Deviated), |r| r.verdict != VerdictTag::InDistribution),
        deviated_exact_rate: fraction(of(Group::Deviated), |r| r.verdict == VerdictTag::Deviated),
        ood_alarm_rate: fraction(of(Group::Ood), |r| r.verdict == VerdictTag::OutOfDistribution),
        ood_deviated_flag_rate: fraction(of(Group::Ood), |r| r.verdict == VerdictTag::Deviated),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuardReport {
    pub records: Vec<ReportRecord>,
    pub aggregates: Aggregates,
}

impl GuardReport {
    pub fn from_records(records: Vec<ReportRecord>) -> Result<Self> {
        let aggregates = aggregate(&records)?;
        Ok(Self { records, aggregates })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_records(path, &self.records)
    }

    /// Checks that record ids are `0..n` and that the stored aggregates equal
    /// a recomputation from the records.
    pub fn audit(&self) -> Result<()> {
        if let Some((i, r)) = self.records.iter().enumerate().find(|(i, r)| r.input_id != *i) {
            return Err(Error::State(format!("record {i} has input_id {}", r.input_id)));
        }
        if self.aggregates.verdicts.total() != self.records.len() {
            return Err(Error::State("verdict counts do not sum to the input count".into()));
        }
        if aggregate(&self.records)? != self.aggregates {
            return Err(Error::State("aggregates differ from recomputation".into()));
        }
        Ok(())
    }
}

pub fn write_records(path: &Path, records: &[ReportRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<ReportRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, group: Group, verdict: VerdictTag, d: f64, truth: usize, subject: usize, refl: usize) -> ReportRecord {
        let final_label = match verdict {
            VerdictTag::InDistribution => Some(subject),
            VerdictTag::Deviated => Some(refl),
            VerdictTag::OutOfDistribution => None,
        };
        ReportRecord {
            input_id: id,
            group,
            source: match group {
                Group::Clean => "clean",
                Group::Deviated => "blur",
                Group::Ood => "other-dataset",
            }
            .into(),
            source_index: id,
            true_label: truth,
            subject_label: subject,
            verdict,
            min_distance: d,
            nearest_train_id: 0,
            reflected_label: refl,
            reflection_distance: d / 2.0,
            final_label,
        }
    }

    fn sample() -> Vec<ReportRecord> {
        use Group::{Clean, Ood};
        use VerdictTag::{InDistribution, OutOfDistribution};
        let (dev, dev_tag) = (Group::Deviated, VerdictTag::Deviated);
        vec![
            rec(0, Clean, InDistribution, 0.1, 1, 1, 1),
            rec(1, Clean, InDistribution, 0.2, 2, 3, 2),
            rec(2, dev, dev_tag, 1.0, 4, 5, 4),
            rec(3, dev, InDistribution, 0.15, 4, 5, 4),
            rec(4, Ood, OutOfDistribution, 9.0, 7, 7, 7),
            rec(5, Ood, dev_tag, 2.0, 7, 1, 2),
        ]
    }

    #[test]
    fn alarmed_deviated_inputs_count_as_flagged() {
        let mut records = sample();
        records[3].verdict = VerdictTag::OutOfDistribution;
        let a = aggregate(&records).unwrap();
        assert_eq!(a.deviated_flag_rate, Some(1.0));
        assert_eq!(a.deviated_exact_rate, Some(0.5));
    }

    #[test]
    fn aggregates_by_hand() {
        let a = aggregate(&sample()).unwrap();
        assert_eq!(a.total, 6);
        assert_eq!(a.clean.subject_accuracy, Some(0.5));
        assert_eq!(a.clean.final_accuracy, Some(0.5));
        assert_eq!(a.deviated.subject_accuracy, Some(0.0));
        assert_eq!(a.deviated.reflection_accuracy, Some(1.0));
        assert_eq!(a.deviated.final_accuracy, Some(0.5));
        assert_eq!(a.mixed.final_accuracy, Some(0.5));
        assert_eq!(a.deviated_flag_rate, Some(0.5));
        assert_eq!(a.deviated_exact_rate, Some(0.5));
        assert_eq!(a.ood_alarm_rate, Some(0.5));
        assert_eq!(a.ood_deviated_flag_rate, Some(0.5));
        // Deviated distances {1.0, 0.15} vs clean {0.1, 0.2}: 3 of 4 pairs.
        assert_eq!(a.auroc_deviated_vs_in, Some(0.75));
        assert_eq!(a.auroc_ood_vs_rest, Some(1.0));
        assert_eq!(a.by_source["blur"].count, 2);
    }

    #[test]
    fn csv_round_trip_and_audit() {
        let report = GuardReport::from_records(sample()).unwrap();
        report.audit().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.csv");
        report.write_csv(&p).unwrap();
        let back = read_records(&p).unwrap();
        assert_eq!(back, report.records);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("input_id,group,source,source_index,true_label,subject_label,verdict,"));
        assert!(text.contains(",ood,"));

        let mut tampered = report.clone();
        tampered.records[0].subject_label = 9;
        assert!(tampered.audit().is_err());
    }

    #[test]
    fn empty_groups_have_no_rates() {
        let only_clean: Vec<_> = sample().into_iter().take(2).collect();
        let a = aggregate(&only_clean).unwrap();
        assert_eq!(a.auroc_deviated_vs_in, None);
        assert_eq!(a.deviated_flag_rate, None);
        assert_eq!(a.deviated.count, 0);
    }
}
