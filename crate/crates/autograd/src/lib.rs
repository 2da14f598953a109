//! A small reverse-mode automatic differentiation engine for convolutional
//! networks on the CPU.
//!
//! Everything is single-threaded and evaluated in a fixed order, so repeated
//! runs on the same machine are bitwise reproducible.

mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;
