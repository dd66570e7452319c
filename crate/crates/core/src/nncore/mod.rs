//! Tensors, parameters, reverse-mode differentiation and the layers built on them.

pub mod functional;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use functional::{attention, conv2d, layer_norm, tconv2d};
pub use gradcheck::{grad_check, Coverage, GradReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{DType, Tensor};
