pub mod backbone;
pub mod blocks;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod head;
pub mod metrics;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, ParseError, Result};
pub use tensor::{Tensor, Var};
