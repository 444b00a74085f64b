//! Dense tensors and reverse-mode differentiation over static graphs.

pub mod gradcheck;
mod graph;
mod tensor;

pub(crate) use graph::logsumexp;
pub use graph::{Evaluation, Feed, Graph, GraphBuilder, NodeId, Op};
pub use tensor::{sign, Tensor};
