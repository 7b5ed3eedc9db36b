//! Dense CPU tensors with a tape-based reverse-mode autodiff.
//!
//! The op set covers what small convolutional encoders, edge networks and
//! contrastive objectives need: strided matmul, conv2d, pooling, bilinear
//! resizing, group norm, row normalization, cross-entropy and a fused masked
//! InfoNCE. Everything is single-threaded and deterministic.

mod graph;
mod kernels;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{log_sum_exp, Gradients, Graph, Var};
pub use optim::{SgdConfig, SgdState};
pub use params::{fan_in_uniform, kaiming_normal, normal, Bound, ParamId, ParamSet};
pub use scalar::Float;
pub use tensor::Tensor;
