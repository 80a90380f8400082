//! Dense tensors, a reverse-mode gradient tape, and the AdamW optimizer.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamWConfig, OptimizerState};
pub use params::ParamStore;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
