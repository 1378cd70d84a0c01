//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor).

pub mod gradcheck;
mod graph;
pub mod kernels;
mod param;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport};
pub use graph::{
    focal_term, sigmoid, smooth_l1_term, softplus, Activation, ConvSpec, Gradients, Graph, Var,
    WarpTable, WarpTap, GELU_K, NORM_EPS,
};
pub use param::{ParamId, Parameter, ParameterStore};
