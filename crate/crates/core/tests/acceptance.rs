//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Criteria 3 to 7 need the MNIST and Fashion-MNIST IDX files under
//! `data/` at the workspace root.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use inputguard::analyzer::{min_distance, ReferenceSet};
use inputguard::harness::config::DataPaths;
use inputguard::harness::manifest::REPORT_FILE;
use inputguard::harness::report::Aggregates;
use inputguard::harness::{load_idx, run_pipeline, RunConfig, Split};
use inputguard::losses::{mine_batch_hard, pairwise_sq_distances, quadruplet_loss, Margins};
use inputguard::metrics::{auroc, tnr_at_tpr, ScoreSet};
use inputguard::reflector::{reflect, ReflectionIndex};
use inputguard::transforms::{apply, Image, TransformKind};
use inputguard::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let s = siamese_gradcheck(50, 101);
    let q = quadruplet_gradcheck(50, 102);
    let secs = t.elapsed().as_secs_f64();
    let pass = s.batches == 50 && q.batches == 50 && s.max_error < FD_TOL && q.max_error < FD_TOL && secs < 30.0;
    outcome(
        pass,
        format!(
            "tri-margin max rel err {:.2e} ({} resampled), quadruplet {:.2e} ({} resampled), {secs:.1}s",
            s.max_error, s.resampled, q.max_error, q.resampled
        ),
    )
}

fn oracles() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut failures = Vec::new();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;

    for case in 0..100 {
        let (p, k) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
        let labels: Vec<usize> = (0..p * k).map(|i| i / k).collect();
        let emb = if case % 2 == 0 { random_grid_matrix(&mut rng, p * k, 3) } else { random_matrix(&mut rng, p * k, 3, 2.0) };
        let hard = mine_batch_hard(&pairwise_sq_distances(&emb), &labels).unwrap();
        let mined_ok = bf_mine(&emb, &labels).iter().enumerate().all(|(a, (pos, neg))| {
            let ((pi, pd), (ni, nd)) = (pos.unwrap(), neg.unwrap());
            hard.hard_pos_idx[a] == pi && hard.hard_neg_idx[a] == ni && close(hard.hard_pos[a], pd) && close(hard.hard_neg[a], nd)
        });
        if !mined_ok {
            failures.push(format!("mining case {case}"));
        }
        let m = Margins::quadruplet_default();
        let q = quadruplet_loss(&emb, &labels, m).unwrap();
        let (an, nn) = bf_quadruplet(&emb, &labels, m);
        if !(close(q.loss_an, an) && close(q.loss_nn, nn) && close(q.loss, an + nn)) {
            failures.push(format!("quadruplet case {case}"));
        }
    }

    for case in 0..100 {
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let n = rng.gen_range(1..=100);
            let grid = case % 2 == 0;
            (0..n).map(|_| if grid { rng.gen_range(0..12) as f64 / 4.0 } else { rng.gen_range(0.0..3.0) }).collect()
        };
        let (pos, neg) = (draw(&mut rng), draw(&mut rng));
        let s = ScoreSet::new(pos.clone(), neg.clone());
        if !close(auroc(&s).unwrap(), bf_auroc(&pos, &neg)) {
            failures.push(format!("auroc case {case}"));
        }
        if !close(tnr_at_tpr(&s, 0.95).unwrap(), bf_tnr_at_tpr(&pos, &neg, 0.95)) {
            failures.push(format!("tnr case {case}"));
        }
    }

    for case in 0..100 {
        let n = rng.gen_range(1..=1000);
        let rows = if case % 2 == 0 { random_grid_matrix(&mut rng, n, 4) } else { random_matrix(&mut rng, n, 4, 2.0) };
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let reference = ReferenceSet::new(rows.clone(), (0..n).collect()).unwrap();
        let index = ReflectionIndex::new(rows.clone(), labels.clone()).unwrap();
        let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-3..=3) as f64).collect();
        let (bi, bd) = bf_nearest(&rows, &q);
        let (d, id) = min_distance(&q, &reference).unwrap();
        let r = reflect(&q, &index).unwrap();
        if !(id == bi && close(d, bd) && r.train_id == bi && r.label == labels[bi] && close(r.distance, bd)) {
            failures.push(format!("nearest-neighbour case {case}"));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    let detail = if failures.is_empty() {
        format!("600 instances agree, {secs:.1}s")
    } else {
        format!("{} mismatches, first: {}, {secs:.1}s", failures.len(), failures[0])
    };
    outcome(pass, detail)
}

fn data_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn desk_config(output_dir: PathBuf) -> RunConfig {
    let root = data_root();
    RunConfig {
        data: DataPaths::standard(&root.join("mnist"), &root.join("fmnist")),
        output_dir,
        ..RunConfig::default()
    }
}

fn missing_data() -> Option<String> {
    let cfg = desk_config(PathBuf::new());
    let d = cfg.data;
    [d.train_images, d.train_labels, d.test_images, d.test_labels, d.ood_images, d.ood_labels]
        .into_iter()
        .find(|p| !p.exists())
        .map(|p| format!("missing {}; run scripts/fetch_data.sh first", p.display()))
}

fn pct(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN) * 100.0
}

fn detection(a: &Aggregates, secs: f64) -> Outcome {
    let au = a.auroc_deviated_vs_in.unwrap_or(0.0);
    let flag = a.deviated_flag_rate.unwrap_or(0.0);
    outcome(
        au >= 0.90 && flag >= 0.70 && secs < 600.0,
        format!(
            "deviated-vs-in AUROC {au:.4} (>= 0.90), flag rate {flag:.4} (>= 0.70; exactly deviated {:.4}), run {secs:.0}s",
            a.deviated_exact_rate.unwrap_or(f64::NAN)
        ),
    )
}

fn ood(a: &Aggregates) -> Outcome {
    let au = a.auroc_ood_vs_rest.unwrap_or(0.0);
    outcome(au >= 0.70, format!("ood-vs-rest AUROC {au:.4} (>= 0.70)"))
}

fn reflection(a: &Aggregates) -> Outcome {
    let Some(blur) = a.by_source.get(TransformKind::Blur.name()) else {
        return outcome(false, "no deviated blur inputs in the report".into());
    };
    let gain = pct(blur.reflection_accuracy) - pct(blur.subject_accuracy);
    let mixed = pct(a.mixed.final_accuracy) - pct(a.mixed.subject_accuracy);
    outcome(
        gain >= 20.0 && mixed >= 15.0,
        format!(
            "blur reflection {:.2}% vs subject {:.2}% (+{gain:.2} >= 20), mixed final {:.2}% vs subject {:.2}% (+{mixed:.2} >= 15)",
            pct(blur.reflection_accuracy),
            pct(blur.subject_accuracy),
            pct(a.mixed.final_accuracy),
            pct(a.mixed.subject_accuracy)
        ),
    )
}

fn non_degradation(a: &Aggregates) -> Outcome {
    let (fin, subj) = (pct(a.clean.final_accuracy), pct(a.clean.subject_accuracy));
    outcome((fin - subj).abs() <= 1.0, format!("clean final {fin:.2}% vs subject {subj:.2}% (within 1.0)"))
}

fn determinism(first: &Path, tmp: &Path) -> Outcome {
    let cfg = desk_config(tmp.join("second"));
    if let Err(e) = run_pipeline(&cfg) {
        return outcome(false, format!("second run failed: {e}"));
    }
    let a = std::fs::read(first.join(REPORT_FILE)).unwrap_or_default();
    let b = std::fs::read(cfg.output_dir.join(REPORT_FILE)).unwrap_or_default();
    outcome(!a.is_empty() && a == b, format!("report.csv {} bytes, identical: {}", a.len(), a == b))
}

fn transforms_and_idx() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let mut problems = Vec::new();
    for case in 0..50 {
        let (h, w) = (rng.gen_range(4..=28), rng.gen_range(4..=28));
        let img = Image::gray(h, w, (0..h * w).map(|_| rng.gen_range(0..=255) as f64).collect()).unwrap();
        for kind in TransformKind::ALL {
            let same = apply(&img, kind, kind.identity_degree()).unwrap();
            if same.pixels().iter().zip(img.pixels()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                problems.push(format!("{kind} identity, case {case}"));
            }
            let degree = match kind {
                TransformKind::Blur => rng.gen_range(0.0..5.0),
                TransformKind::Bright => rng.gen_range(0.0..255.0),
                TransformKind::Contrast => rng.gen_range(0.01..=1.0),
                TransformKind::Zoom => rng.gen_range(1.0..5.0),
            };
            let out = apply(&img, kind, degree).unwrap();
            if out.pixels().iter().any(|p| !(0.0..=255.0).contains(p)) {
                problems.push(format!("{kind} {degree} out of range, case {case}"));
            }
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = (dir.path().join("images"), dir.path().join("labels"));
    let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
    bytes.extend([0, 128, 255, 64]);
    std::fs::write(&images, &bytes).unwrap();
    std::fs::write(&labels, [0, 0, 8, 1, 0, 0, 0, 1, 3]).unwrap();
    match load_idx(&images, &labels, Split::Test) {
        Ok(ds) if ds.images[0].pixels() == [0.0, 128.0, 255.0, 64.0] && ds.labels == [3] => {}
        other => problems.push(format!("fixture parsed as {other:?}")),
    }
    bytes[3] = 1;
    std::fs::write(&images, &bytes).unwrap();
    if !matches!(load_idx(&images, &labels, Split::Test), Err(Error::Format { .. })) {
        problems.push("bad image magic accepted".into());
    }
    let detail = match problems.first() {
        None => "identity, range, fixture and magic checks hold".to_string(),
        Some(p) => format!("{} problems, first: {p}", problems.len()),
    };
    outcome(problems.is_empty(), detail)
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient correctness", gradients()),
        (2, "oracle equivalence", oracles()),
    ];

    let desk = [(3, "deviated detection"), (4, "ood detection"), (5, "reflection gain"), (6, "non-degradation"), (7, "determinism")];
    if let Some(why) = missing_data() {
        for (n, name) in desk {
            results.push((n, name, outcome(false, why.clone())));
        }
    } else {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = desk_config(tmp.path().join("first"));
        let t = Instant::now();
        match run_pipeline(&cfg) {
            Ok(report) => {
                let secs = t.elapsed().as_secs_f64();
                let a = &report.aggregates;
                results.push((3, desk[0].1, detection(a, secs)));
                results.push((4, desk[1].1, ood(a)));
                results.push((5, desk[2].1, reflection(a)));
                results.push((6, desk[3].1, non_degradation(a)));
                results.push((7, desk[4].1, determinism(&cfg.output_dir, tmp.path())));
            }
            Err(e) => {
                for (n, name) in desk {
                    results.push((n, name, outcome(false, format!("pipeline failed: {e}"))));
                }
            }
        }
    }
    results.push((8, "transform and IDX conformance", transforms_and_idx()));

    let mut all = true;
    for (n, name, o) in &results {
        all &= o.pass;
        println!("{} criterion {n} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if all { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
