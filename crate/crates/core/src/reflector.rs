//! Input reflection: a quadruplet-trained embedding and an exact
//! nearest-neighbor index over the embedded training set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyzer::embed;
use crate::error::{Error, Result};
use crate::losses::{quadruplet_loss_network, Margins};
use crate::numerics::optimizer::layer_slots;
use crate::numerics::{nearest_row, optimizer_step, DenseLayer, EmbeddingNetwork, Matrix, OptimizerState, Trainable};
use crate::sampling::{finish_training, training_view, PkSampler, TrainingReport};

#[derive(Clone, Debug, PartialEq)]
pub struct ReflectionIndex {
    embeddings: Matrix,
    labels: Vec<usize>,
}

impl ReflectionIndex {
    pub fn new(embeddings: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != embeddings.rows() {
            return Err(Error::dim("reflection index labels", embeddings.rows(), labels.len()));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::rflx::write_rflx(path, &self.embeddings, &self.labels)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (embeddings, labels) = crate::rflx::read_rflx(path)?;
        Self::new(embeddings, labels).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reflection {
    pub train_id: usize,
    pub label: usize,
    pub distance: f64,
}

pub fn build_index(net: &EmbeddingNetwork, train: &Matrix, labels: &[usize]) -> Result<ReflectionIndex> {
    if labels.is_empty() {
        return Err(Error::Input("cannot index an empty training set".into()));
    }
    if labels.len() != train.rows() {
        return Err(Error::dim("index labels", train.rows(), labels.len()));
    }
    ReflectionIndex::new(embed(net, train)?, labels.to_vec())
}

/// Nearest training row to `x`; ties go to the lowest row.
pub fn reflect(x: &[f64], index: &ReflectionIndex) -> Result<Reflection> {
    if index.is_empty() {
        return Err(Error::State("reflection index is empty".into()));
    }
    let (train_id, distance) = nearest_row(&index.embeddings, x)?;
    Ok(Reflection {
        train_id,
        label: index.labels[train_id],
        distance,
    })
}

pub fn reflect_all(queries: &Matrix, index: &ReflectionIndex) -> Result<Vec<Reflection>> {
    (0..queries.rows())
        .into_par_iter()
        .map(|i| reflect(queries.row(i), index))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrupletConfig {
    pub head_dims: Vec<usize>,
    pub epochs: usize,
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub margins: Margins,
    pub learning_rate: f64,
    pub seed: u64,
    pub freeze_trunk: bool,
}

impl Default for QuadrupletConfig {
    fn default() -> Self {
        Self {
            head_dims: vec![64],
            epochs: 10,
            classes_per_batch: 8,
            samples_per_class: 4,
            margins: Margins::quadruplet_default(),
            learning_rate: 1e-3,
            seed: 0,
            freeze_trunk: true,
        }
    }
}

/// Trains an embedding with the batch-hard quadruplet loss over PK batches.
pub fn train_quadruplet(
    trunk: &[DenseLayer],
    train: &Matrix,
    labels: &[usize],
    config: &QuadrupletConfig,
) -> Result<(EmbeddingNetwork, TrainingReport)> {
    if labels.len() != train.rows() {
        return Err(Error::Input(format!(
            "quadruplet inputs misaligned: {} rows, {} labels",
            train.rows(),
            labels.len()
        )));
    }
    config.margins.validate_quadruplet()?;
    let sampler = PkSampler::new(labels, config.classes_per_batch, config.samples_per_class)?;
    if sampler.num_classes() < 3 || config.classes_per_batch < 3 {
        log::warn!("fewer than three classes per batch: the negative-pair term is always zero");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = EmbeddingNetwork::with_new_head(trunk, train.cols(), &config.head_dims, &mut rng)?;
    let (mut work, inputs) = training_view(&net, &[train], config.freeze_trunk)?;
    let x = &inputs[0];
    let mut opt = OptimizerState::adam(config.learning_rate)?;

    let batches = sampler.batches_per_epoch(train.rows());
    let mut report = TrainingReport::default();
    for _ in 0..config.epochs {
        let mut total = 0.0;
        for _ in 0..batches {
            let rows = sampler.sample(&mut rng);
            let batch_labels: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let (q, grads) =
                quadruplet_loss_network(&x.select_rows(&rows)?, &batch_labels, &work, config.margins, Trainable::All)?;
            total += q.loss;
            let mut slots = layer_slots("quadruplet", work.layers_mut(), &grads);
            optimizer_step(&mut slots, &mut opt)?;
        }
        let mean = total / batches as f64;
        log::debug!("quadruplet epoch {}: loss {mean:.5}", report.epoch_losses.len() + 1);
        report.epoch_losses.push(mean);
    }
    finish_training(&mut net, work, config.freeze_trunk)?;
    Ok((net, report))
}

/// Mean squared embedding distance over same-class and over different-class
/// pairs of `data`.
pub fn intra_inter_distances(net: &EmbeddingNetwork, data: &Matrix, labels: &[usize]) -> Result<(f64, f64)> {
    if labels.len() != data.rows() {
        return Err(Error::dim("distance labels", data.rows(), labels.len()));
    }
    let e = embed(net, data)?;
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..e.rows() {
        for j in (i + 1)..e.rows() {
            let d = crate::numerics::squared_distance(e.row(i), e.row(j));
            if labels[i] == labels[j] {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                nx += 1;
            }
        }
    }
    if ni == 0 || nx == 0 {
        return Err(Error::Input("need both same-class and different-class pairs".into()));
    }
    Ok((intra / ni as f64, inter / nx as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::squared_distance;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn reflect_example() {
        let idx = ReflectionIndex::new(Matrix::from_rows(&[[0.0, 0.0], [10.0, 10.0]]).unwrap(), vec![7, 3]).unwrap();
        let r = reflect(&[1.0, 1.0], &idx).unwrap();
        assert_eq!(r, Reflection { train_id: 0, label: 7, distance: 2.0 });
        let r = reflect(&[10.0, 10.0], &idx).unwrap();
        assert_eq!((r.train_id, r.distance), (1, 0.0));
        assert!(reflect(&[1.0], &idx).is_err());
    }

    #[test]
    fn empty_index_is_a_state_error() {
        let idx = ReflectionIndex {
            embeddings: Matrix::zeros(1, 1),
            labels: vec![],
        };
        assert!(matches!(reflect(&[0.0], &idx), Err(Error::State(_))));
    }

    #[test]
    fn build_index_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = EmbeddingNetwork::with_new_head(&[], 2, &[3], &mut rng).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2], [0.3, -0.4], [1.0, 2.0]]).unwrap();
        let idx = build_index(&net, &x, &[0, 1, 0]).unwrap();
        assert_eq!(idx.embeddings(), &net.forward(&x).unwrap());
        assert!(build_index(&net, &x, &[]).is_err());
        assert!(build_index(&net, &x, &[1]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.rflx");
        idx.save(&p).unwrap();
        assert_eq!(ReflectionIndex::load(&p).unwrap(), idx);
        // Every training row reflects onto itself.
        for (i, r) in reflect_all(&x, &ReflectionIndex::new(x.clone(), vec![4, 5, 6]).unwrap())
            .unwrap()
            .into_iter()
            .enumerate()
        {
            assert_eq!((r.train_id, r.distance), (i, 0.0));
        }
    }

    fn clusters(n_per: usize, classes: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n_per * classes {
            let c = i % classes;
            rows.push(
                (0..6)
                    .map(|k| if k == c { 1.0 } else { 0.0 } + rng.gen_range(-0.6..0.6))
                    .collect::<Vec<f64>>(),
            );
            labels.push(c);
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    fn cfg(epochs: usize) -> QuadrupletConfig {
        QuadrupletConfig {
            head_dims: vec![16, 4],
            epochs,
            classes_per_batch: 4,
            samples_per_class: 4,
            learning_rate: 5e-3,
            seed: 2,
            ..QuadrupletConfig::default()
        }
    }

    #[test]
    fn quadruplet_training_separates_classes() {
        let (x, y) = clusters(40, 4, 3);
        let (net, rep) = train_quadruplet(&[], &x, &y, &cfg(30)).unwrap();
        assert!(rep.epoch_losses.last().unwrap() < &rep.epoch_losses[0]);
        let (xt, yt) = clusters(20, 4, 4);
        let (intra, inter) = intra_inter_distances(&net, &xt, &yt).unwrap();
        assert!(intra < inter, "{intra} {inter}");
        let idx = build_index(&net, &x, &y).unwrap();
        let refl = reflect_all(&net.forward(&xt).unwrap(), &idx).unwrap();
        let acc = refl.iter().zip(&yt).filter(|(r, &l)| r.label == l).count() as f64 / yt.len() as f64;
        assert!(acc > 0.8, "{acc}");
    }

    #[test]
    fn quadruplet_is_deterministic_and_validates() {
        let (x, y) = clusters(8, 3, 5);
        assert_eq!(train_quadruplet(&[], &x, &y, &cfg(2)).unwrap().0, train_quadruplet(&[], &x, &y, &cfg(2)).unwrap().0);
        assert!(train_quadruplet(&[], &x, &vec![0; x.rows()], &cfg(1)).is_err());
        let mut bad = cfg(1);
        bad.margins = Margins::new(0.1, 0.5);
        assert!(train_quadruplet(&[], &x, &y, &bad).is_err());
    }

    proptest! {
        #[test]
        fn reflect_is_exact(
            pts in proptest::collection::vec(proptest::collection::vec(-20i32..20, 3), 1..80),
            q in proptest::collection::vec(-20i32..20, 3),
        ) {
            let rows: Vec<Vec<f64>> = pts.iter().map(|r| r.iter().map(|&v| v as f64 / 3.0).collect()).collect();
            let q: Vec<f64> = q.iter().map(|&v| v as f64 / 3.0).collect();
            let labels: Vec<usize> = (0..rows.len()).map(|i| i % 7).collect();
            let idx = ReflectionIndex::new(Matrix::from_rows(&rows).unwrap(), labels.clone()).unwrap();
            let r = reflect(&q, &idx).unwrap();
            prop_assert_eq!(r.label, labels[r.train_id]);
            prop_assert_eq!(r.distance, squared_distance(&rows[r.train_id], &q));
            prop_assert!(rows.iter().all(|row| squared_distance(row, &q) >= r.distance));
            prop_assert!(rows[..r.train_id].iter().all(|row| squared_distance(row, &q) > r.distance));
        }
    }
}
