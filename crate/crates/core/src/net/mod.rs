//! A small MLP with manual backpropagation and SGD.

pub mod gradcheck;
mod linear;
mod network;
mod train;

pub use linear::{Linear, LinearGrad};
pub use network::{error_rate, softmax_cross_entropy, ForwardCache, Gradients, Layer, MlpSpec, Network, ParamGrad};
pub use train::{step_inputs, train, train_step, BatchSource, Sgd, SgdConfig, TrainBatch};
