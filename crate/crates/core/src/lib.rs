pub mod adapters;
pub mod container;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod graph;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
