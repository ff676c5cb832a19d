//! Tensors, reverse-mode differentiation, layer primitives and AdamW.

pub mod checkpoint;
mod embedding;
pub mod graph;
pub mod kernels;
mod optim;
mod params;
mod rng;
mod tensor;

pub use checkpoint::{Container, Precision};
pub use embedding::{sinusoidal_embedding, time_embeddings};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use params::ParameterStore;
pub use rng::Rng;
pub use tensor::Tensor;
