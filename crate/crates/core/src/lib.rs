pub mod commands;
pub mod config;
pub mod decoders;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod metrics;
pub mod negative;
pub mod pipeline;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
