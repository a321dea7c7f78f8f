//! Dense tensors and tape-based reverse-mode differentiation for the small
//! set of operations convolutional image-translation networks need.

pub mod conv;
mod float;
mod graph;
mod tensor;

pub use float::{gemm, gemm_strided, Float, MatRef};
pub use graph::{sigmoid, softplus, Conv2dOpts, CropOrigin, Gradients, Graph, Var};
pub use tensor::Tensor;
