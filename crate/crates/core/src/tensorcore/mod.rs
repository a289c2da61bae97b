//! Dense tensors, reverse-mode differentiation and gradient verification.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use ops::{elu_plus_one, layer_norm, softmax, LAYER_NORM_EPS};
pub use rng::Rng;
pub use tensor::Tensor;
