//! Minimal CPU tensor engine: a reverse-mode tape over NCHW f32 tensors with the layer set
//! the segmentation networks and heads need.

mod gemm;
mod graph;
mod optim;
mod store;
mod tensor;

pub use graph::{BnObservation, Gradients, Graph, NodeId, BN_EPS, SIGMOID_CEIL, SIGMOID_FLOOR};
pub use optim::Adam;
pub use store::ParamStore;
pub use tensor::Tensor;
