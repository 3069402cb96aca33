//! End-to-end run: subject model, corpora, both embeddings, calibration and
//! evaluation, with every artifact persisted under the output directory.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::corpora::{ensure_dir, generate_corpora, CorpusConfig, CorpusSet};
use super::guard::Guard;
use super::idx::{load_idx, Dataset, Split};
use super::manifest::*;
use super::report::{GuardReport, Group, ReportRecord};
use crate::analyzer::{build_reference, calibrate_full, embed, min_distances, train_siamese, Calibration, ReferenceSet, SiameseData};
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::numerics::checkpoint::{load_classifier, load_embedding, save_classifier, save_embedding};
use crate::numerics::{train_classifier, Classifier, EmbeddingNetwork, Matrix};
use crate::reflector::{build_index, train_quadruplet, ReflectionIndex};
use crate::sampling::TrainingReport;
use crate::transforms::{make_extreme_with, ExtremeDegrees, LabelPredictor, TransformKind};

/// The four dataset subsets of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Data {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub ood: Dataset,
}

/// Each subset is a seeded uniform sample of its file, rows kept in file
/// order. Train and validation are disjoint samples of the in-distribution
/// train file.
pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    let d = &cfg.data;
    let s = &cfg.sizes;
    let full = load_idx(&d.train_images, &d.train_labels, Split::Train)?;
    if full.len() < s.train + s.validation {
        return Err(Error::Input(format!(
            "{} holds {} images, need {} for train + validation",
            d.train_images.display(),
            full.len(),
            s.train + s.validation
        )));
    }
    let test = load_idx(&d.test_images, &d.test_labels, Split::Test)?;
    let ood = load_idx(&d.ood_images, &d.ood_labels, Split::Test)?;
    for (name, ds, need) in [("test", &test, s.test), ("ood", &ood, s.ood)] {
        if ds.len() < need {
            return Err(Error::Input(format!("{name} file holds {} images, need {need}", ds.len())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(0));
    let mut draw = |n: usize, k: usize| sample(&mut rng, n, k).into_vec();
    let picked = draw(full.len(), s.train + s.validation);
    let (mut train_rows, mut val_rows) = (picked[..s.train].to_vec(), picked[s.train..].to_vec());
    let mut test_rows = draw(test.len(), s.test);
    let mut ood_rows = draw(ood.len(), s.ood);
    for rows in [&mut train_rows, &mut val_rows, &mut test_rows, &mut ood_rows] {
        rows.sort_unstable();
    }
    let data = Data {
        train: full.select(&train_rows, Split::Train),
        validation: full.select(&val_rows, Split::Validation),
        test: test.select(&test_rows, Split::Test),
        ood: ood.select(&ood_rows, Split::Test),
    };
    let classes = cfg.subject.num_classes;
    data.train.check_labels(classes)?;
    data.validation.check_labels(classes)?;
    data.test.check_labels(classes)?;
    Ok(data)
}

pub const TRAIN_DEVIATED: &str = "train-deviated";
pub const TRAIN_EXTREME: &str = "train-extreme";
pub const VAL_DEVIATED: &str = "val-deviated";
pub const TEST_DEVIATED: &str = "test-deviated";
pub const TEST_EXTREME: &str = "test-extreme";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineCorpora {
    /// Crash-degree images of the calibration kind over the train subset.
    pub train_deviated: CorpusSet,
    /// Extreme calibration-kind image of every train row.
    pub train_extreme: CorpusSet,
    pub val_deviated: CorpusSet,
    /// Crash-degree images of every kind over the test subset.
    pub test_deviated: CorpusSet,
    /// One extreme image per test row, kinds cycling with the row index.
    pub test_extreme: CorpusSet,
    pub dropped: BTreeMap<String, usize>,
}

impl PipelineCorpora {
    fn sets(&self) -> [(&'static str, &CorpusSet); 5] {
        [
            (TRAIN_DEVIATED, &self.train_deviated),
            (TRAIN_EXTREME, &self.train_extreme),
            (VAL_DEVIATED, &self.val_deviated),
            (TEST_DEVIATED, &self.test_deviated),
            (TEST_EXTREME, &self.test_extreme),
        ]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        for (name, set) in self.sets() {
            set.save(dir, name)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, dropped: BTreeMap<String, usize>) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::State(format!("missing corpora directory {}", dir.display())));
        }
        Ok(Self {
            train_deviated: CorpusSet::load(dir, TRAIN_DEVIATED)?,
            train_extreme: CorpusSet::load(dir, TRAIN_EXTREME)?,
            val_deviated: CorpusSet::load(dir, VAL_DEVIATED)?,
            test_deviated: CorpusSet::load(dir, TEST_DEVIATED)?,
            test_extreme: CorpusSet::load(dir, TEST_EXTREME)?,
            dropped,
        })
    }

    pub fn summary(&self) -> CorpusSummary {
        CorpusSummary {
            sizes: self.sets().iter().map(|(n, s)| (n.to_string(), s.len())).collect(),
            dropped: self.dropped.clone(),
        }
    }
}

/// Extreme version of every image, with the kind chosen by `row % 4`.
pub fn cycled_extremes(ds: &Dataset, degrees: &ExtremeDegrees) -> Result<CorpusSet> {
    let mut set = CorpusSet::default();
    for (i, (img, &label)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let kind = TransformKind::ALL[i % TransformKind::ALL.len()];
        set.push(make_extreme_with(img, kind, degrees)?.quantized(), label, i, kind, degrees.get(kind));
    }
    Ok(set)
}

fn deviated_only(ds: &Dataset, clf: &Classifier, cfg: &RunConfig, kinds: &[TransformKind], name: &str, dropped: &mut BTreeMap<String, usize>) -> Result<CorpusSet> {
    let corpora = generate_corpora(
        ds,
        clf,
        &CorpusConfig {
            steps: cfg.crash_steps,
            extreme: cfg.extreme,
            deviated_kinds: kinds.to_vec(),
            extreme_kinds: Vec::new(),
            skip_misclassified: true,
        },
    )?;
    let mut set = CorpusSet::default();
    for kind in kinds {
        dropped.insert(format!("{name}/{kind}"), corpora.dropped[kind]);
        dropped.insert(format!("{name}/{kind}/misclassified"), corpora.misclassified[kind]);
        set.extend(corpora.deviated[kind].clone());
    }
    Ok(set)
}

pub fn stage_train_subject(cfg: &RunConfig, data: &Data, dir: &Path) -> Result<(Classifier, SubjectSummary)> {
    let (clf, report) = train_classifier(
        &data.train.features()?,
        &data.train.labels,
        cfg.subject.epochs,
        &cfg.classifier_config(),
    )?;
    let test_accuracy = accuracy(&clf.predict_batch(&data.test.images)?, &data.test.labels)?;
    log::info!(
        "subject model: train accuracy {:.4}, test accuracy {test_accuracy:.4}",
        report.train_accuracy
    );
    save_classifier(&clf, &dir.join(SUBJECT_FILE))?;
    Ok((
        clf,
        SubjectSummary {
            train_accuracy: report.train_accuracy,
            test_accuracy,
            epoch_losses: report.epoch_losses,
        },
    ))
}

pub fn stage_gen_corpora(cfg: &RunConfig, data: &Data, clf: &Classifier, dir: &Path) -> Result<PipelineCorpora> {
    let mut dropped = BTreeMap::new();
    let cal = [cfg.calibration_kind];
    let corpora = PipelineCorpora {
        train_deviated: deviated_only(&data.train, clf, cfg, &cal, TRAIN_DEVIATED, &mut dropped)?,
        train_extreme: cycled_extremes(&data.train, &cfg.extreme)?,
        val_deviated: deviated_only(&data.validation, clf, cfg, &cal, VAL_DEVIATED, &mut dropped)?,
        test_deviated: deviated_only(&data.test, clf, cfg, &TransformKind::ALL, TEST_DEVIATED, &mut dropped)?,
        test_extreme: cycled_extremes(&data.test, &cfg.extreme)?,
        dropped,
    };
    corpora.save(&dir.join(CORPORA_DIR))?;
    Ok(corpora)
}

fn nonempty<'a>(set: &'a CorpusSet, name: &str) -> Result<&'a CorpusSet> {
    if set.is_empty() {
        Err(Error::State(format!("corpus {name} is empty")))
    } else {
        Ok(set)
    }
}

pub fn stage_train_siamese(
    cfg: &RunConfig,
    data: &Data,
    corpora: &PipelineCorpora,
    clf: &Classifier,
    dir: &Path,
) -> Result<(EmbeddingNetwork, ReferenceSet, TrainingReport)> {
    let dev = nonempty(&corpora.train_deviated, TRAIN_DEVIATED)?;
    let train = data.train.features()?;
    let rows = &dev.source_ids;
    let anchors = train.select_rows(rows)?;
    let extreme = corpora.train_extreme.features()?.select_rows(rows)?;
    let deviated = dev.features()?;
    let (net, report) = train_siamese(
        clf.trunk(),
        SiameseData {
            train: &anchors,
            labels: &dev.labels,
            deviated: &deviated,
            extreme: &extreme,
        },
        &cfg.siamese_config(),
    )?;
    let reference = build_reference(&net, &train)?;
    save_embedding(&net, &dir.join(SIAMESE_FILE))?;
    reference.save(&dir.join(REFERENCE_FILE))?;
    Ok((net, reference, report))
}

/// The reflection network is trained on the clean train subset plus its
/// calibration-kind deviations, and indexes the same rows.
pub fn stage_train_quadruplet(
    cfg: &RunConfig,
    data: &Data,
    corpora: &PipelineCorpora,
    clf: &Classifier,
    dir: &Path,
) -> Result<(EmbeddingNetwork, ReflectionIndex, TrainingReport)> {
    let mut labels = data.train.labels.clone();
    let train = data.train.features()?;
    let x = if corpora.train_deviated.is_empty() {
        train
    } else {
        labels.extend(&corpora.train_deviated.labels);
        Matrix::vstack(&[&train, &corpora.train_deviated.features()?])?
    };
    let (net, report) = train_quadruplet(clf.trunk(), &x, &labels, &cfg.quadruplet_config())?;
    let index = build_index(&net, &x, &labels)?;
    save_embedding(&net, &dir.join(QUADRUPLET_FILE))?;
    index.save(&dir.join(INDEX_FILE))?;
    Ok((net, index, report))
}

pub fn stage_calibrate(
    cfg: &RunConfig,
    data: &Data,
    corpora: &PipelineCorpora,
    siamese: &EmbeddingNetwork,
    reference: &ReferenceSet,
) -> Result<Calibration> {
    let dev = nonempty(&corpora.val_deviated, VAL_DEVIATED)?;
    let dists = |x: &Matrix| -> Result<Vec<f64>> {
        Ok(min_distances(&embed(siamese, x)?, reference)?.into_iter().map(|(d, _)| d).collect())
    };
    let in_val = dists(&data.validation.features()?)?;
    let dev_val = dists(&dev.features()?)?;
    let cal = calibrate_full(&in_val, &dev_val, cfg.target_tpr)?;
    log::info!("thresholds: k_in {:.6}, k_out {:.6}", cal.k_in, cal.k_out);
    Ok(cal)
}

pub fn stage_evaluate(data: &Data, corpora: &PipelineCorpora, guard: &Guard, dir: &Path) -> Result<GuardReport> {
    let mut images = Vec::new();
    let mut meta: Vec<(Group, String, usize, usize)> = Vec::new();
    for (i, (img, &l)) in data.test.images.iter().zip(&data.test.labels).enumerate() {
        images.push(img.clone());
        meta.push((Group::Clean, "clean".into(), i, l));
    }
    let dev = &corpora.test_deviated;
    for i in 0..dev.len() {
        images.push(dev.images[i].clone());
        meta.push((Group::Deviated, dev.kinds[i].to_string(), dev.source_ids[i], dev.labels[i]));
    }
    for (i, (img, &l)) in data.ood.images.iter().zip(&data.ood.labels).enumerate() {
        images.push(img.clone());
        meta.push((Group::Ood, "other-dataset".into(), i, l));
    }
    let ext = &corpora.test_extreme;
    for i in 0..ext.len() {
        images.push(ext.images[i].clone());
        meta.push((Group::Ood, format!("extreme-{}", ext.kinds[i]), ext.source_ids[i], ext.labels[i]));
    }

    let outcomes = guard.check_batch(&images)?;
    let records = outcomes
        .into_iter()
        .zip(meta)
        .enumerate()
        .map(|(id, (o, (group, source, source_index, true_label)))| ReportRecord {
            input_id: id,
            group,
            source,
            source_index,
            true_label,
            subject_label: o.subject_label,
            verdict: o.verdict.tag,
            min_distance: o.verdict.min_distance,
            nearest_train_id: o.verdict.nearest_id,
            reflected_label: o.reflection.label,
            reflection_distance: o.reflection.distance,
            final_label: o.final_label,
        })
        .collect();
    let report = GuardReport::from_records(records)?;
    report.audit()?;
    report.write_csv(&dir.join(REPORT_FILE))?;
    Ok(report)
}

/// Runs `f` as pipeline stage `stage`: times it, records it in the manifest
/// and, on failure, persists the manifest marked failed before returning a
/// stage error.
pub fn run_stage<T>(
    manifest: &mut Manifest,
    dir: &Path,
    stage: &'static str,
    f: impl FnOnce(&mut Manifest) -> Result<T>,
) -> Result<T> {
    log::info!("stage {stage}");
    let start = Instant::now();
    match f(manifest) {
        Ok(v) => {
            manifest.record_stage(stage, start.elapsed().as_secs_f64());
            manifest.save(dir)?;
            Ok(v)
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.failed_stage = Some(stage.to_string());
            manifest.error = Some(e.to_string());
            if let Err(save_err) = manifest.save(dir) {
                log::error!("could not persist the partial manifest: {save_err}");
            }
            Err(Error::Stage {
                stage,
                source: Box::new(e),
            })
        }
    }
}

/// Full run from raw data to the report.
pub fn run_pipeline(cfg: &RunConfig) -> Result<GuardReport> {
    cfg.validate()?;
    let dir = cfg.output_dir.as_path();
    ensure_dir(dir)?;
    let mut m = Manifest::new(cfg.clone());
    m.save(dir)?;

    let data = run_stage(&mut m, dir, "load-data", |_| load_data(cfg))?;
    let clf = run_stage(&mut m, dir, "train-subject", |m| {
        let (clf, summary) = stage_train_subject(cfg, &data, dir)?;
        m.subject = Some(summary);
        Ok(clf)
    })?;
    let corpora = run_stage(&mut m, dir, "gen-corpora", |m| {
        let c = stage_gen_corpora(cfg, &data, &clf, dir)?;
        m.corpora = Some(c.summary());
        Ok(c)
    })?;
    let (siamese, reference) = run_stage(&mut m, dir, "train-siamese", |m| {
        let (net, reference, report) = stage_train_siamese(cfg, &data, &corpora, &clf, dir)?;
        m.siamese = Some(report);
        Ok((net, reference))
    })?;
    let (quadruplet, index) = run_stage(&mut m, dir, "train-quadruplet", |m| {
        let (net, index, report) = stage_train_quadruplet(cfg, &data, &corpora, &clf, dir)?;
        m.quadruplet = Some(report);
        Ok((net, index))
    })?;
    let calibration = run_stage(&mut m, dir, "calibrate", |m| {
        let cal = stage_calibrate(cfg, &data, &corpora, &siamese, &reference)?;
        m.calibration = Some(cal.clone());
        Ok(cal)
    })?;
    let guard = Guard {
        subject: clf,
        siamese,
        quadruplet,
        reference,
        index,
        thresholds: calibration.thresholds()?,
    };
    let report = run_stage(&mut m, dir, "evaluate", |m| {
        let r = stage_evaluate(&data, &corpora, &guard, dir)?;
        m.metrics = Some(r.aggregates.clone());
        Ok(r)
    })?;
    m.status = RunStatus::Complete;
    m.save(dir)?;
    Ok(report)
}

/// Individually runnable stages, reading earlier artifacts from disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    TrainSubject,
    GenCorpora,
    TrainSiamese,
    TrainQuadruplet,
    Calibrate,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainSubject => "train-subject",
            Stage::GenCorpora => "gen-corpora",
            Stage::TrainSiamese => "train-siamese",
            Stage::TrainQuadruplet => "train-quadruplet",
            Stage::Calibrate => "calibrate",
            Stage::Evaluate => "evaluate",
        }
    }
}

fn load_artifact<T>(dir: &Path, name: &str, load: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let p = dir.join(name);
    if !p.exists() {
        return Err(Error::State(format!("missing artifact {}; run the earlier stages first", p.display())));
    }
    load(&p)
}

fn load_corpora(dir: &Path, m: &Manifest) -> Result<PipelineCorpora> {
    let dropped = m.corpora.as_ref().map(|c| c.dropped.clone()).unwrap_or_default();
    PipelineCorpora::load(&dir.join(CORPORA_DIR), dropped)
}

/// Runs one stage against the artifacts already in `cfg.output_dir`.
pub fn run_single_stage(cfg: &RunConfig, stage: Stage) -> Result<()> {
    cfg.validate()?;
    let dir = cfg.output_dir.as_path();
    ensure_dir(dir)?;
    let mut m = Manifest::load_or_new(dir, cfg)?;
    m.status = RunStatus::Running;
    m.failed_stage = None;
    m.error = None;
    run_stage(&mut m, dir, stage.name(), |m| {
        let data = load_data(cfg)?;
        let subject = || load_artifact(dir, SUBJECT_FILE, load_classifier);
        match stage {
            Stage::TrainSubject => {
                m.subject = Some(stage_train_subject(cfg, &data, dir)?.1);
            }
            Stage::GenCorpora => {
                m.corpora = Some(stage_gen_corpora(cfg, &data, &subject()?, dir)?.summary());
            }
            Stage::TrainSiamese => {
                let corpora = load_corpora(dir, m)?;
                m.siamese = Some(stage_train_siamese(cfg, &data, &corpora, &subject()?, dir)?.2);
            }
            Stage::TrainQuadruplet => {
                let corpora = load_corpora(dir, m)?;
                m.quadruplet = Some(stage_train_quadruplet(cfg, &data, &corpora, &subject()?, dir)?.2);
            }
            Stage::Calibrate => {
                let corpora = load_corpora(dir, m)?;
                let siamese = load_artifact(dir, SIAMESE_FILE, load_embedding)?;
                let reference = load_artifact(dir, REFERENCE_FILE, ReferenceSet::load)?;
                m.calibration = Some(stage_calibrate(cfg, &data, &corpora, &siamese, &reference)?);
            }
            Stage::Evaluate => {
                m.save(dir)?;
                let corpora = load_corpora(dir, m)?;
                let guard = Guard::load(dir)?;
                m.metrics = Some(stage_evaluate(&data, &corpora, &guard, dir)?.aggregates);
                m.status = RunStatus::Complete;
            }
        }
        Ok(())
    })
}
