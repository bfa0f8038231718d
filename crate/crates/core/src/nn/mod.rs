//! Tensors, the differentiation tape and the layer primitives built on it.

mod conv;
mod graph;
mod ops;
mod param;
mod tensor;

pub use conv::Conv2dSpec;
pub use graph::{BackwardArgs, BackwardFn, Gradients, Graph, Var};
pub use param::{drop_path, fan_in_uniform, uniform, Bound, ParamId, ParamStore, Parameter};
pub use tensor::{strides, Real, Tensor};
