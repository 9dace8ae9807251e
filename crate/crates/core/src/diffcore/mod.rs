//! Reverse-mode differentiation over a small set of tensor primitives.
//!
//! A [`Graph`] is built once, then re-evaluated with freshly bound inputs.
//! `Graph<f32>` is used for training; `Graph::<f64>::verification()` turns on
//! non-finite checks and is what [`finite_diff_check`] runs against.

mod check;
mod graph;
pub mod kernels;
mod tensor;

pub use check::finite_diff_check;
pub use graph::{Gradients, Graph, GraphError, NodeId};
pub use tensor::{Real, Tensor};
