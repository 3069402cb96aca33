use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::network::{backward_layers, check_chain, forward_layers, forward_trace, Activation, DenseLayer, Gradients};
use super::optimizer::{layer_slots, optimizer_step, OptimizerState};
use crate::error::{Error, Result};

/// Softmax classifier: a ReLU trunk followed by a linear logit layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    layers: Vec<DenseLayer>,
}

impl Classifier {
    pub fn new(trunk: Vec<DenseLayer>, softmax_head: DenseLayer) -> Result<Self> {
        if softmax_head.activation != Activation::Identity {
            return Err(Error::Input("softmax head must produce raw logits".into()));
        }
        let mut layers = trunk;
        layers.push(softmax_head);
        check_chain(&layers)?;
        Ok(Self { layers })
    }

    pub fn trunk(&self) -> &[DenseLayer] {
        &self.layers[..self.layers.len() - 1]
    }

    pub fn softmax_head(&self) -> &DenseLayer {
        self.layers.last().expect("classifier has a head")
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn num_classes(&self) -> usize {
        self.softmax_head().outputs()
    }

    pub fn logits(&self, batch: &Matrix) -> Result<Matrix> {
        forward_layers(&self.layers, batch)
    }

    /// Class probabilities, one row per input.
    pub fn predict_proba(&self, batch: &Matrix) -> Result<Matrix> {
        let mut logits = self.logits(batch)?;
        let cols = logits.cols();
        for row in logits.data_mut().chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        Ok(logits)
    }

    /// Arg-max class per row; ties go to the lowest class id.
    pub fn predict(&self, batch: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 128],
            num_classes: 10,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub train_accuracy: f64,
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a softmax classifier with mini-batch Adam on cross-entropy.
pub fn train_classifier(
    data: &Matrix,
    labels: &[usize],
    epochs: usize,
    config: &ClassifierConfig,
) -> Result<(Classifier, ClassifierReport)> {
    if labels.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if labels.len() != data.rows() {
        return Err(Error::dim("classifier labels", data.rows(), labels.len()));
    }
    let classes = config.num_classes;
    if classes < 2 {
        return Err(Error::Input("need at least two classes".into()));
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l >= classes {
            return Err(Error::Input(format!("label {l} outside [0, {classes})")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Input(format!("class {c} has no training samples")));
    }
    if config.batch_size == 0 || config.hidden.contains(&0) {
        return Err(Error::Input("batch size and hidden widths must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut fan_in = data.cols();
    let mut trunk = Vec::with_capacity(config.hidden.len());
    for &h in &config.hidden {
        trunk.push(DenseLayer::init(fan_in, h, Activation::Relu, &mut rng));
        fan_in = h;
    }
    let head = DenseLayer::init(fan_in, classes, Activation::Identity, &mut rng);
    let mut model = Classifier::new(trunk, head)?;
    let mut opt = OptimizerState::adam(config.learning_rate)?;

    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let x = data.select_rows(chunk)?;
            let trace = forward_trace(&model.layers, &x)?;
            let mut grad = trace.output().clone();
            let n = chunk.len() as f64;
            for (row, &idx) in grad.data_mut().chunks_exact_mut(classes).zip(chunk) {
                softmax_in_place(row);
                let y = labels[idx];
                total -= row[y].max(1e-300).ln();
                row[y] -= 1.0;
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
            let grads = Gradients {
                layers: backward_layers(&model.layers, &trace, &grad, 0)?,
            };
            let mut slots = layer_slots("classifier", &mut model.layers, &grads);
            optimizer_step(&mut slots, &mut opt)?;
        }
        epoch_losses.push(total / labels.len() as f64);
    }

    let predictions = model.predict(data)?;
    let train_accuracy = crate::metrics::accuracy(&predictions, labels)?;
    Ok((
        model,
        ClassifierReport {
            train_accuracy,
            epoch_losses,
        },
    ))
}
