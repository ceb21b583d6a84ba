//! Dense neural-network engine: tensors, ReLU MLPs with an extractor /
//! classifier split, softmax cross-entropy, SGD-momentum and Adam, binary
//! checkpoints and finite-difference gradient checking.

pub mod checkpoint;
pub mod gradcheck;
mod loss;
mod model;
mod optim;
mod tensor;

pub use loss::{log_softmax, softmax, softmax_ce_loss, Targets};
pub(crate) use loss::check_temperature;
pub use model::{Backprop, ForwardTrace, Gradients, Layer, ModelParams};
pub use optim::{OptimizerKind, OptimizerState};
pub use tensor::Tensor2;
pub(crate) use tensor::dot;
