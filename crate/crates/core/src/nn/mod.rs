//! Minimal differentiable kernels: the tape, layers, parameter storage and
//! a finite-difference gradient checker.

mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use graph::{gem_exponent, gem_rho_for_exponent, Grads, Graph, Var};
pub use layers::{
    AttentionConfig, Conv2d, Conv2dSpec, LayerNorm, Linear, MultiHeadSelfAttention,
    TransformerBlock, TransformerConfig, WidthPadding, LAYER_NORM_EPS,
};
pub use params::{GradBuffer, ParamId, ParamSet};
pub use tensor::{shift_columns, Scalar, Tensor};
