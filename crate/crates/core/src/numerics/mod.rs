//! Dense tensors, reverse-mode differentiation, parameters, and Adam.

pub mod adam;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use params::{BoundParams, Initializer, ParameterStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{elementwise, matmul, sigmoid_scalar, softmax, softmax_rows, Elementwise, Tensor};
