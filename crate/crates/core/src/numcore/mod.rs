//! Dense array arithmetic and reverse-mode differentiation.

pub mod array;
pub mod graph;
pub mod linalg;

pub use array::{logsumexp, Array};
pub use graph::{
    check_gradients, compare_gradients, DiffGraph, Evaluation, GradCheckReport, GraphBuilder,
    NodeId,
};
