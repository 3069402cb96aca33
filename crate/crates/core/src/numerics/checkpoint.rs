//! JSON model checkpoints.
//!
//! Weights are stored as decimal strings in Rust's shortest round-trip
//! formatting, so a save/load cycle reproduces every `f64` bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::Classifier;
use super::matrix::Matrix;
use super::network::{Activation, DenseLayer, EmbeddingNetwork};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Embedding,
    Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerRole {
    Trunk,
    Head,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub role: LayerRole,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<String>,
    pub bias: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelKind,
    pub layers: Vec<LayerSpec>,
}

fn encode(values: &[f64]) -> Vec<String> {
    values.iter().map(|v| v.to_string()).collect()
}

fn decode(values: &[String], what: &str) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Input(format!("bad {what} value {s:?} in checkpoint")))
        })
        .collect()
}

fn layer_spec(layer: &DenseLayer, role: LayerRole) -> LayerSpec {
    LayerSpec {
        role,
        inputs: layer.inputs(),
        outputs: layer.outputs(),
        activation: layer.activation,
        weights: encode(layer.weights.data()),
        bias: encode(&layer.bias),
    }
}

fn layer_from_spec(spec: &LayerSpec) -> Result<DenseLayer> {
    let weights = Matrix::from_vec(spec.outputs, spec.inputs, decode(&spec.weights, "weight")?)?;
    DenseLayer::new(weights, decode(&spec.bias, "bias")?, spec.activation)
}

impl Checkpoint {
    pub fn from_embedding(net: &EmbeddingNetwork) -> Self {
        let mut layers: Vec<LayerSpec> = net.trunk().iter().map(|l| layer_spec(l, LayerRole::Trunk)).collect();
        layers.extend(net.head().iter().map(|l| layer_spec(l, LayerRole::Head)));
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: ModelKind::Embedding,
            layers,
        }
    }

    pub fn from_classifier(clf: &Classifier) -> Self {
        let mut layers: Vec<LayerSpec> = clf.trunk().iter().map(|l| layer_spec(l, LayerRole::Trunk)).collect();
        layers.push(layer_spec(clf.softmax_head(), LayerRole::Softmax));
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: ModelKind::Classifier,
            layers,
        }
    }

    fn check(&self, expected: ModelKind) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Input(format!(
                "unsupported checkpoint format_version {}",
                self.format_version
            )));
        }
        if self.model != expected {
            return Err(Error::Input(format!(
                "checkpoint holds a {:?} model, expected {:?}",
                self.model, expected
            )));
        }
        Ok(())
    }

    fn split(&self, tail: LayerRole) -> Result<(Vec<DenseLayer>, Vec<DenseLayer>)> {
        let mut trunk = Vec::new();
        let mut rest = Vec::new();
        for spec in &self.layers {
            match spec.role {
                LayerRole::Trunk if rest.is_empty() => trunk.push(layer_from_spec(spec)?),
                role if role == tail => rest.push(layer_from_spec(spec)?),
                role => {
                    return Err(Error::Input(format!("unexpected {role:?} layer in checkpoint")))
                }
            }
        }
        Ok((trunk, rest))
    }

    pub fn into_embedding(self) -> Result<EmbeddingNetwork> {
        self.check(ModelKind::Embedding)?;
        let (trunk, head) = self.split(LayerRole::Head)?;
        EmbeddingNetwork::new(trunk, head)
    }

    pub fn into_classifier(self) -> Result<Classifier> {
        self.check(ModelKind::Classifier)?;
        let (trunk, mut head) = self.split(LayerRole::Softmax)?;
        if head.len() != 1 {
            return Err(Error::Input("classifier checkpoint needs exactly one softmax layer".into()));
        }
        Classifier::new(trunk, head.remove(0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub fn save_embedding(net: &EmbeddingNetwork, path: &Path) -> Result<()> {
    Checkpoint::from_embedding(net).save(path)
}

pub fn load_embedding(path: &Path) -> Result<EmbeddingNetwork> {
    Checkpoint::load(path)?.into_embedding()
}

pub fn save_classifier(clf: &Classifier, path: &Path) -> Result<()> {
    Checkpoint::from_classifier(clf).save(path)
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    Checkpoint::load(path)?.into_classifier()
}
