//! Minimal dense/convolutional network kernels with hand-written backward passes.

pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;

pub use loss::{softmax, CrossEntropy};
pub use optim::{Adam, AdamConfig};
pub use params::{Grads, Param, ParamId, ParamStore};
