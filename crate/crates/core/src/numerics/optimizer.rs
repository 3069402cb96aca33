use serde::{Deserialize, Serialize};

use super::network::{DenseLayer, Gradients};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adaptive moment estimation with bias correction.
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
    /// Plain gradient descent.
    Sgd,
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// A parameter tensor and its gradient, flattened.
pub struct ParamSlot<'a> {
    pub name: String,
    pub values: &'a mut [f64],
    pub grad: &'a [f64],
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    learning_rate: f64,
    kind: OptimizerKind,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, kind: OptimizerKind) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Range {
                what: "learning_rate",
                value: learning_rate,
                range: "(0, inf)",
            });
        }
        Ok(Self {
            learning_rate,
            kind,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step: 0,
        })
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(learning_rate, OptimizerKind::adam())
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(learning_rate, OptimizerKind::Sgd)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }
}

/// Applies one update to `params` in place and advances `state`.
///
/// All gradients are validated before any parameter is touched, so a
/// non-finite gradient leaves both parameters and state unchanged.
pub fn optimizer_step(params: &mut [ParamSlot<'_>], state: &mut OptimizerState) -> Result<()> {
    for p in params.iter() {
        if p.values.len() != p.grad.len() {
            return Err(Error::dim("gradient length", p.values.len(), p.grad.len()));
        }
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric { param: p.name.clone() });
        }
    }
    if let OptimizerKind::Adam { .. } = state.kind {
        if state.first_moment.is_empty() {
            state.first_moment = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
            state.second_moment = state.first_moment.clone();
        }
        if state.first_moment.len() != params.len()
            || state
                .first_moment
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.values.len())
        {
            return Err(Error::dim(
                "optimizer accumulators",
                format!("{} tensors", state.first_moment.len()),
                format!("{} tensors", params.len()),
            ));
        }
    }

    state.step += 1;
    let lr = state.learning_rate;
    match state.kind {
        OptimizerKind::Sgd => {
            for p in params.iter_mut() {
                for (v, g) in p.values.iter_mut().zip(p.grad) {
                    *v -= lr * g;
                }
            }
        }
        OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
        } => {
            let t = state.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for ((p, m), s) in params
                .iter_mut()
                .zip(state.first_moment.iter_mut())
                .zip(state.second_moment.iter_mut())
            {
                for ((v, g), (mi, si)) in p
                    .values
                    .iter_mut()
                    .zip(p.grad)
                    .zip(m.iter_mut().zip(s.iter_mut()))
                {
                    *mi = beta1 * *mi + (1.0 - beta1) * g;
                    *si = beta2 * *si + (1.0 - beta2) * g * g;
                    let m_hat = *mi / c1;
                    let s_hat = *si / c2;
                    *v -= lr * m_hat / (s_hat.sqrt() + epsilon);
                }
            }
        }
    }
    Ok(())
}

/// Builds optimizer slots for every layer that has a gradient.
pub(crate) fn layer_slots<'a>(
    prefix: &str,
    layers: &'a mut [DenseLayer],
    grads: &'a Gradients,
) -> Vec<ParamSlot<'a>> {
    let mut slots = Vec::new();
    for (i, (layer, grad)) in layers.iter_mut().zip(&grads.layers).enumerate() {
        if let Some(g) = grad {
            slots.push(ParamSlot {
                name: format!("{prefix}.{i}.weights"),
                values: layer.weights.data_mut(),
                grad: g.weights.data(),
            });
            slots.push(ParamSlot {
                name: format!("{prefix}.{i}.bias"),
                values: &mut layer.bias,
                grad: &g.bias,
            });
        }
    }
    slots
}
