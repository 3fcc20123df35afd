//! Minimal reverse-mode automatic differentiation over dense f64 tensors.

mod graph;
mod hooks;
mod optim;
mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use hooks::{apply_grad_masks, GradMaskHook};
pub use optim::{Adam, AdamConfig};
pub use tensor::{Param, ParamId, ParamStore, Tensor};
