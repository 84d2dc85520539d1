//! Minimal dense-tensor math with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computation happens on
//! a [`Graph`] tape; parameters live in a [`ParamStore`] and are updated with
//! [`adamw_step`]. [`gradcheck`] certifies any scalar composite against central
//! finite differences in 64-bit precision.

mod conv;
mod error;
mod float;
mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use conv::{col2im, im2col, ConvGeometry};
pub use error::{Result, TensorError};
pub use float::{gemm, DType, Float};
pub use gradcheck::{gradcheck, gradcheck_params, GradcheckReport, REL_ERR_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, clip_grad_norm, AdamWConfig, AdamWState, Binding, ParamId, ParamStore};
pub use tensor::Tensor;
