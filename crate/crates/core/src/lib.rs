pub mod autograd;
pub mod degradation;
pub mod depthio;
pub mod error;
pub mod evaluate;
pub mod fusion;
pub mod nn;
pub mod objective;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use tensor::{Real, Tensor};
