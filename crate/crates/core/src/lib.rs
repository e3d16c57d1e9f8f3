//! Full-batch training of multi-layer perceptrons and graph convolutional
//! networks with the deep-learning ADMM scheme: one backward sweep and one
//! forward sweep of block updates per iteration, followed by a dual step.

pub mod admm;
pub mod baselines;
pub mod checks;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gcn;
pub mod matrix;
pub mod mlp;
pub mod risk;
pub mod rng;
pub mod solvers;
pub mod synthetic;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use rng::Rng;
