use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected layer computing `act(x · Wᵀ + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `outputs × inputs`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::dim("dense layer bias", weights.rows(), bias.len()));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Input("dense layer bias is not finite".into()));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Uniform fan-in scaled initialization with zero bias: limit
    /// `sqrt(6 / fan_in)` for ReLU layers and `sqrt(3 / fan_in)` otherwise.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let gain = match activation {
            Activation::Relu => 6.0,
            Activation::Identity => 3.0,
        };
        let limit = (gain / inputs as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Self {
            weights: Matrix::from_parts(outputs, inputs, data),
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.inputs() {
            return Err(Error::dim("dense layer input", self.inputs(), x.cols()));
        }
        let mut z = x.matmul_bt(&self.weights)?;
        let relu = self.activation == Activation::Relu;
        for row in z.data_mut().chunks_exact_mut(self.bias.len()) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
                if relu && *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Ok(z)
    }
}

/// Gradient of one dense layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Per-layer parameter gradients, in network order. Frozen layers are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<LayerGrad>>,
}

impl Gradients {
    /// Accumulates `other` into `self`; both must come from the same network
    /// with the same trainable set.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                    *x += y;
                }
                for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                    *x += y;
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().flatten().all(|g| {
            g.weights.data().iter().all(|v| *v == 0.0) && g.bias.iter().all(|v| *v == 0.0)
        })
    }
}

/// Which layers receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Trunk layers are frozen.
    HeadOnly,
}

/// Layer inputs recorded during a forward pass, plus the final output.
pub(crate) struct Trace {
    /// `inputs[i]` is the input to layer `i`.
    inputs: Vec<Matrix>,
    output: Matrix,
}

impl Trace {
    pub(crate) fn output(&self) -> &Matrix {
        &self.output
    }
}

pub(crate) fn check_chain(layers: &[DenseLayer]) -> Result<()> {
    for pair in layers.windows(2) {
        if pair[0].outputs() != pair[1].inputs() {
            return Err(Error::dim(
                "layer chain",
                pair[0].outputs(),
                pair[1].inputs(),
            ));
        }
    }
    Ok(())
}

pub(crate) fn forward_layers(layers: &[DenseLayer], x: &Matrix) -> Result<Matrix> {
    let mut cur = x.clone();
    for layer in layers {
        cur = layer.forward(&cur)?;
    }
    Ok(cur)
}

pub(crate) fn forward_trace(layers: &[DenseLayer], x: &Matrix) -> Result<Trace> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for layer in layers {
        let next = layer.forward(&cur)?;
        inputs.push(cur);
        cur = next;
    }
    Ok(Trace {
        inputs,
        output: cur,
    })
}

/// Backpropagates `upstream` (gradient w.r.t. the trace output) and returns
/// gradients for layers `first_trainable..`; earlier layers get `None`.
pub(crate) fn backward_layers(
    layers: &[DenseLayer],
    trace: &Trace,
    upstream: &Matrix,
    first_trainable: usize,
) -> Result<Vec<Option<LayerGrad>>> {
    if upstream.shape() != trace.output.shape() {
        return Err(Error::dim(
            "upstream gradient",
            format!("{:?}", trace.output.shape()),
            format!("{:?}", upstream.shape()),
        ));
    }
    let mut grads: Vec<Option<LayerGrad>> = vec![None; layers.len()];
    let mut delta = upstream.clone();
    for i in (first_trainable..layers.len()).rev() {
        let layer = &layers[i];
        if layer.activation == Activation::Relu {
            // ReLU output is positive exactly where the pre-activation is.
            let out = if i + 1 < layers.len() {
                &trace.inputs[i + 1]
            } else {
                &trace.output
            };
            for (d, o) in delta.data_mut().iter_mut().zip(out.data()) {
                if *o <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let input = &trace.inputs[i];
        let gw = delta.matmul_at(input)?;
        let gb = delta.column_sums();
        if i > first_trainable {
            delta = delta.matmul(&layer.weights)?;
        }
        grads[i] = Some(LayerGrad {
            weights: gw,
            bias: gb,
        });
    }
    Ok(grads)
}

/// Shared feature trunk followed by a dense head; the head output is the
/// embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNetwork {
    layers: Vec<DenseLayer>,
    trunk_len: usize,
}

impl EmbeddingNetwork {
    /// The head must be non-empty; the trunk may be empty, in which case the
    /// network consumes trunk features directly.
    pub fn new(trunk: Vec<DenseLayer>, head: Vec<DenseLayer>) -> Result<Self> {
        if head.is_empty() {
            return Err(Error::Input("embedding network needs at least one head layer".into()));
        }
        let trunk_len = trunk.len();
        let mut layers = trunk;
        layers.extend(head);
        check_chain(&layers)?;
        Ok(Self { layers, trunk_len })
    }

    /// New head of `head_dims` on top of a copy of `trunk`. Hidden head layers
    /// use ReLU; the last one is linear.
    pub fn with_new_head<R: Rng + ?Sized>(
        trunk: &[DenseLayer],
        input_dim: usize,
        head_dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if head_dims.is_empty() || head_dims.contains(&0) {
            return Err(Error::Input(format!("invalid head dims {head_dims:?}")));
        }
        let mut fan_in = trunk.last().map(DenseLayer::outputs).unwrap_or(input_dim);
        let mut head = Vec::with_capacity(head_dims.len());
        for (i, &d) in head_dims.iter().enumerate() {
            let act = if i + 1 == head_dims.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            head.push(DenseLayer::init(fan_in, d, act, rng));
            fan_in = d;
        }
        Self::new(trunk.to_vec(), head)
    }

    pub fn trunk(&self) -> &[DenseLayer] {
        &self.layers[..self.trunk_len]
    }

    pub fn head(&self) -> &[DenseLayer] {
        &self.layers[self.trunk_len..]
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().map(DenseLayer::outputs).unwrap_or(0)
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        forward_layers(&self.layers, batch)
    }

    /// Trunk output for `batch` (the batch itself when the trunk is empty).
    pub fn trunk_features(&self, batch: &Matrix) -> Result<Matrix> {
        forward_layers(self.trunk(), batch)
    }

    /// A network holding only the head layers.
    pub fn head_network(&self) -> EmbeddingNetwork {
        EmbeddingNetwork {
            layers: self.head().to_vec(),
            trunk_len: 0,
        }
    }

    /// Replaces the head with that of `head` (a trunk-less network).
    pub fn set_head(&mut self, head: &EmbeddingNetwork) -> Result<()> {
        let mut layers = self.trunk().to_vec();
        layers.extend(head.layers.iter().cloned());
        check_chain(&layers)?;
        self.layers = layers;
        Ok(())
    }

    pub(crate) fn first_trainable(&self, trainable: Trainable) -> usize {
        match trainable {
            Trainable::All => 0,
            Trainable::HeadOnly => self.trunk_len,
        }
    }

    pub(crate) fn trace(&self, batch: &Matrix) -> Result<Trace> {
        forward_trace(&self.layers, batch)
    }

    pub(crate) fn backward_trace(
        &self,
        trace: &Trace,
        upstream: &Matrix,
        trainable: Trainable,
    ) -> Result<Gradients> {
        let layers = backward_layers(&self.layers, trace, upstream, self.first_trainable(trainable))?;
        Ok(Gradients { layers })
    }

    /// Parameter gradients of `sum(upstream ⊙ forward(batch))`.
    pub fn backward(&self, batch: &Matrix, upstream: &Matrix, trainable: Trainable) -> Result<Gradients> {
        let trace = self.trace(batch)?;
        self.backward_trace(&trace, upstream, trainable)
    }
}

/// One embedding per row of `batch`.
pub fn forward(net: &EmbeddingNetwork, batch: &Matrix) -> Result<Matrix> {
    net.forward(batch)
}

pub fn backward(
    net: &EmbeddingNetwork,
    batch: &Matrix,
    upstream: &Matrix,
    trainable: Trainable,
) -> Result<Gradients> {
    net.backward(batch, upstream, trainable)
}
