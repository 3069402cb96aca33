//! Shared test support: brute-force oracles, the finite-difference gradient
//! check and a small synthetic image dataset.
#![allow(dead_code)]

use std::path::Path;

use inputguard::harness::config::DataPaths;
use inputguard::harness::idx::write_idx;
use inputguard::harness::RunConfig;
use inputguard::losses::{
    mine_batch_hard, mine_negative_pairs, pairwise_sq_distances, quadruplet_loss_network, siamese_trimargin_loss,
    trimargin_arguments, Margins, SiameseBatch,
};
use inputguard::numerics::{Activation, DenseLayer, EmbeddingNetwork, Gradients, Matrix, Trainable};
use inputguard::transforms::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Brute-force oracles

pub fn bf_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

/// `(index, distance)` of a mined sample, `None` when no candidate exists.
pub type Mined = Option<(usize, f64)>;

/// Hardest positive (farthest distinct same-label, lowest index on ties) and
/// hardest negative (nearest other-label, lowest index on ties) per anchor.
pub fn bf_mine(emb: &Matrix, labels: &[usize]) -> Vec<(Mined, Mined)> {
    let n = emb.rows();
    let mut out = Vec::new();
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            let d = bf_sq_dist(emb.row(a), emb.row(j));
            if j != a && labels[j] == labels[a]
                && (pos.is_none() || d > pos.unwrap().1) {
                    pos = Some((j, d));
                }
            if labels[j] != labels[a]
                && (neg.is_none() || d < neg.unwrap().1) {
                    neg = Some((j, d));
                }
        }
        out.push((pos, neg));
    }
    out
}

/// Quadruplet loss recomputed from scratch: `(loss_an, loss_nn)`.
pub fn bf_quadruplet(emb: &Matrix, labels: &[usize], m: Margins) -> (f64, f64) {
    let n = emb.rows();
    let mined = bf_mine(emb, labels);
    let (mut an, mut nn) = (0.0, 0.0);
    for a in 0..n {
        let dp = mined[a].0.map(|(_, d)| d).unwrap_or(0.0);
        if let Some((_, dn)) = mined[a].1 {
            an += (dp - dn + m.m1).max(0.0);
        }
        // Closest pair of samples from two labels that differ from each other
        // and from the anchor.
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in 0..n {
                if labels[i] != labels[a] && labels[j] != labels[a] && labels[i] != labels[j] {
                    best = best.min(bf_sq_dist(emb.row(i), emb.row(j)));
                }
            }
        }
        if best.is_finite() {
            nn += (dp - best + m.m2).max(0.0);
        }
    }
    (an / n as f64, nn / n as f64)
}

/// Pair-counting AUROC over every (positive, negative) pair.
pub fn bf_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for &p in pos {
        for &q in neg {
            if p > q {
                s += 1.0;
            } else if p == q {
                s += 0.5;
            }
        }
    }
    s / (pos.len() * neg.len()) as f64
}

/// TNR at the largest positive score `t` with `#[pos ≥ t] ≥ tpr·|pos|`.
pub fn bf_tnr_at_tpr(pos: &[f64], neg: &[f64], tpr: f64) -> f64 {
    let need = tpr * pos.len() as f64;
    let mut best = f64::NEG_INFINITY;
    for &t in pos {
        let kept = pos.iter().filter(|&&p| p >= t).count() as f64;
        if kept + 1e-9 >= need && t > best {
            best = t;
        }
    }
    neg.iter().filter(|&&q| q < best).count() as f64 / neg.len() as f64
}

/// Nearest row by full scan, lowest index on ties.
pub fn bf_nearest(rows: &Matrix, q: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for i in 0..rows.rows() {
        let d = bf_sq_dist(rows.row(i), q);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Random small grid-valued embeddings, so that exact distance ties occur.
pub fn random_grid_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-3..=3) as f64).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Batches with a hinge argument, mining gap or ReLU pre-activation closer
/// than this to its switching point are resampled.
pub const KINK_RADIUS: f64 = 1e-4;

/// Small network: ReLU trunk plus linear head, random biases included.
pub fn small_net(rng: &mut ChaCha8Rng, input: usize) -> EmbeddingNetwork {
    let mut layer = |i: usize, o: usize, act: Activation| {
        let mut l = DenseLayer::init(i, o, act, rng);
        for b in &mut l.bias {
            *b = rng.gen_range(-0.1..0.1);
        }
        l
    };
    let trunk = vec![layer(input, 7, Activation::Relu), layer(7, 5, Activation::Relu)];
    let head = vec![layer(5, 4, Activation::Identity)];
    EmbeddingNetwork::new(trunk, head).unwrap()
}

/// True when no ReLU pre-activation for `x` is within `r` of zero.
pub fn relu_clear(net: &EmbeddingNetwork, x: &Matrix, r: f64) -> bool {
    let mut h = x.clone();
    for layer in net.layers() {
        let lin = DenseLayer::new(layer.weights.clone(), layer.bias.clone(), Activation::Identity).unwrap();
        let z = lin.forward(&h).unwrap();
        if layer.activation == Activation::Relu && z.data().iter().any(|v| v.abs() < r) {
            return false;
        }
        h = layer.forward(&h).unwrap();
    }
    true
}

fn flat(g: &Gradients) -> Vec<f64> {
    let mut v = Vec::new();
    for l in g.layers.iter().flatten() {
        v.extend_from_slice(l.weights.data());
        v.extend_from_slice(&l.bias);
    }
    v
}

fn param_mut(net: &mut EmbeddingNetwork, mut k: usize) -> &mut f64 {
    for layer in net.layers_mut() {
        let w = layer.weights.data().len();
        if k < w {
            return &mut layer.weights.data_mut()[k];
        }
        k -= w;
        if k < layer.bias.len() {
            return &mut layer.bias[k];
        }
        k -= layer.bias.len();
    }
    panic!("parameter index out of range")
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Largest relative error between `analytic` and central differences of
/// `loss` over every parameter of `net`.
pub fn fd_max_error(net: &EmbeddingNetwork, analytic: &Gradients, loss: impl Fn(&EmbeddingNetwork) -> f64) -> f64 {
    let a = flat(analytic);
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (k, &ak) in a.iter().enumerate() {
        let orig = *param_mut(&mut probe, k);
        *param_mut(&mut probe, k) = orig + FD_EPS;
        let up = loss(&probe);
        *param_mut(&mut probe, k) = orig - FD_EPS;
        let down = loss(&probe);
        *param_mut(&mut probe, k) = orig;
        worst = worst.max(relative_error(ak, (up - down) / (2.0 * FD_EPS)));
    }
    worst
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub batches: usize,
    pub resampled: usize,
    pub max_error: f64,
}

fn siamese_kink_free(net: &EmbeddingNetwork, b: &SiameseBatch, m: Margins) -> bool {
    let stacked = Matrix::vstack(&[&b.anchors, &b.partners, &b.deviated, &b.extreme]).unwrap();
    if !relu_clear(net, &stacked, KINK_RADIUS) {
        return false;
    }
    let e = |x: &Matrix| net.forward(x).unwrap();
    let (a, p, d, x) = (e(&b.anchors), e(&b.partners), e(&b.deviated), e(&b.extreme));
    (0..b.len()).all(|r| {
        let args = trimargin_arguments(
            bf_sq_dist(a.row(r), p.row(r)),
            bf_sq_dist(a.row(r), d.row(r)),
            bf_sq_dist(a.row(r), x.row(r)),
            m,
        );
        args.iter().all(|v| v.abs() > KINK_RADIUS)
    })
}

/// Gradient check of the tri-margin loss through `small_net` on `batches`
/// seeded batches of at most 8 rows.
pub fn siamese_gradcheck(batches: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Margins::siamese_default();
    let mut out = GradCheck::default();
    while out.batches < batches {
        let net = small_net(&mut rng, 6);
        let n = rng.gen_range(2..=8);
        let anchors = random_matrix(&mut rng, n, 6, 1.0);
        let near = |rng: &mut ChaCha8Rng, s: f64| {
            let noise = random_matrix(rng, n, 6, s);
            Matrix::from_vec(n, 6, anchors.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect()).unwrap()
        };
        let partners = near(&mut rng, 0.3);
        let deviated = near(&mut rng, 0.8);
        let extreme = near(&mut rng, 2.0);
        let labels = (0..n).map(|i| i % 3).collect();
        let batch = SiameseBatch::new(anchors, partners, deviated, extreme, labels).unwrap();
        if !siamese_kink_free(&net, &batch, m) {
            out.resampled += 1;
            continue;
        }
        let (_, grads) = siamese_trimargin_loss(&batch, &net, m, Trainable::All).unwrap();
        let err = fd_max_error(&net, &grads, |p| siamese_trimargin_loss(&batch, p, m, Trainable::All).unwrap().0);
        out.max_error = out.max_error.max(err);
        out.batches += 1;
    }
    out
}

fn quadruplet_kink_free(net: &EmbeddingNetwork, x: &Matrix, labels: &[usize], m: Margins) -> bool {
    if !relu_clear(net, x, KINK_RADIUS) {
        return false;
    }
    let emb = net.forward(x).unwrap();
    let n = emb.rows();
    let d = pairwise_sq_distances(&emb);
    let hard = mine_batch_hard(&d, labels).unwrap();
    let pairs = mine_negative_pairs(&d, labels);
    for a in 0..n {
        // The mined positive and negative must win by more than the radius.
        for j in 0..n {
            if j != a && labels[j] == labels[a] && j != hard.hard_pos_idx[a] && hard.hard_pos[a] - d.get(a, j) < KINK_RADIUS {
                return false;
            }
            if labels[j] != labels[a] && j != hard.hard_neg_idx[a] && d.get(a, j) - hard.hard_neg[a] < KINK_RADIUS {
                return false;
            }
        }
        if (hard.hard_pos[a] - hard.hard_neg[a] + m.m1).abs() < KINK_RADIUS {
            return false;
        }
        if let Some((p, q, dnn)) = pairs[a] {
            if (hard.hard_pos[a] - dnn + m.m2).abs() < KINK_RADIUS {
                return false;
            }
            for i in 0..n {
                for j in 0..n {
                    let valid = labels[i] != labels[a] && labels[j] != labels[a] && labels[i] != labels[j];
                    let same = (i, j) == (p, q) || (i, j) == (q, p);
                    if valid && !same && d.get(i, j) - dnn < KINK_RADIUS {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Gradient check of the quadruplet loss through `small_net` on `batches`
/// seeded PK-shaped batches of at most 8 rows.
pub fn quadruplet_gradcheck(batches: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Margins::quadruplet_default();
    let mut out = GradCheck::default();
    while out.batches < batches {
        let net = small_net(&mut rng, 6);
        let (p, k) = if rng.gen_bool(0.5) { (4, 2) } else { (3, 2) };
        let n = p * k;
        let x = random_matrix(&mut rng, n, 6, 1.0);
        let labels: Vec<usize> = (0..n).map(|i| i / k).collect();
        if !quadruplet_kink_free(&net, &x, &labels, m) {
            out.resampled += 1;
            continue;
        }
        let (_, grads) = quadruplet_loss_network(&x, &labels, &net, m, Trainable::All).unwrap();
        let err = fd_max_error(&net, &grads, |net| {
            quadruplet_loss_network(&x, &labels, net, m, Trainable::All).unwrap().0.loss
        });
        out.max_error = out.max_error.max(err);
        out.batches += 1;
    }
    out
}

// ---------------------------------------------------------------------------
// Synthetic image data

pub const SYN_SIZE: usize = 12;

/// Class `c` of ten: a bright bar, horizontal for `c < 5` and vertical
/// otherwise, at a class-specific offset, on a dim noisy background.
pub fn synthetic_digit(rng: &mut ChaCha8Rng, class: usize) -> Image {
    let s = SYN_SIZE;
    let mut px = vec![0.0; s * s];
    for v in &mut px {
        *v = rng.gen_range(0..30) as f64;
    }
    let pos = 1 + 2 * (class % 5);
    for t in 1..s - 1 {
        for w in 0..2 {
            let (r, c) = if class < 5 { (pos + w, t) } else { (t, pos + w) };
            px[r * s + c] = rng.gen_range(180..=255) as f64;
        }
    }
    Image::gray(s, s, px).unwrap()
}

/// Out-of-distribution images: random checkerboards.
pub fn synthetic_other(rng: &mut ChaCha8Rng) -> Image {
    let s = SYN_SIZE;
    let cell = rng.gen_range(2..=4);
    let phase = rng.gen_range(0..2);
    let px = (0..s * s)
        .map(|i| {
            let (r, c) = (i / s, i % s);
            if ((r / cell) + (c / cell) + phase) % 2 == 0 { 220.0 } else { 10.0 }
        })
        .collect();
    Image::gray(s, s, px).unwrap()
}

fn digits(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Image>, Vec<usize>) {
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
    let images = labels.iter().map(|&c| synthetic_digit(rng, c)).collect();
    (images, labels)
}

/// Writes the synthetic IDX files under `dir` and returns a small run
/// configuration pointing at them.
pub fn synthetic_run(dir: &Path, seed: u64) -> RunConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_dir = dir.join("digits");
    let ood_dir = dir.join("other");
    std::fs::create_dir_all(&in_dir).unwrap();
    std::fs::create_dir_all(&ood_dir).unwrap();
    let paths = DataPaths::standard(&in_dir, &ood_dir);
    let (tr, trl) = digits(&mut rng, 600);
    write_idx(&paths.train_images, &paths.train_labels, &tr, &trl).unwrap();
    let (te, tel) = digits(&mut rng, 150);
    write_idx(&paths.test_images, &paths.test_labels, &te, &tel).unwrap();
    let ood: Vec<Image> = (0..100).map(|_| synthetic_other(&mut rng)).collect();
    write_idx(&paths.ood_images, &paths.ood_labels, &ood, &vec![0; 100]).unwrap();

    let mut cfg = RunConfig {
        seed,
        data: paths,
        output_dir: dir.join("artifacts"),
        ..RunConfig::default()
    };
    cfg.sizes.train = 450;
    cfg.sizes.validation = 120;
    cfg.sizes.test = 120;
    cfg.sizes.ood = 80;
    cfg.subject.hidden = vec![32, 16];
    cfg.subject.epochs = 30;
    cfg.siamese.epochs = 6;
    cfg.quadruplet.epochs = 4;
    cfg
}
