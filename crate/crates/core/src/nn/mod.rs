//! Minimal reverse-mode differentiation engine, the layers the two models need,
//! optimizers and a finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod linalg;
pub mod optim;
pub mod tensor;

#[cfg(test)]
mod tests;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use layers::{attention_layer, dense, lstm_cell, LstmNames, LstmVars};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tensor::{Parameters, Tensor};
