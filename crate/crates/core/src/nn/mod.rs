//! Minimal neural-network toolkit: autodiff tape, transformer layers,
//! parameter storage and the AdamW optimiser.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod posenc;

pub use graph::{Gradients, Graph, Mat, NodeId};
pub use optim::{AdamW, OptimizerSpec};
pub use params::ParamStore;
