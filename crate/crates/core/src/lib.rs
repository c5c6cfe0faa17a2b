//! Structured filter pruning driven by first-order Taylor importance.

mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod explain;
pub mod graph;
pub mod prune;
pub mod report;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{NetworkGraph, PruneGroups};
pub use tensor::{Tape, Tensor, Var};
