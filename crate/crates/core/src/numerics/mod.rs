//! Dense linear algebra, small feed-forward networks with analytic gradients,
//! and first-order optimizers.

pub mod checkpoint;
pub mod classifier;
pub mod matrix;
pub mod network;
pub mod optimizer;

pub use checkpoint::Checkpoint;
pub use classifier::{train_classifier, Classifier, ClassifierConfig, ClassifierReport};
pub use matrix::{nearest_row, squared_distance, Matrix};
pub use network::{backward, forward, Activation, DenseLayer, EmbeddingNetwork, Gradients, LayerGrad, Trainable};
pub use optimizer::{optimizer_step, OptimizerKind, OptimizerState, ParamSlot};
