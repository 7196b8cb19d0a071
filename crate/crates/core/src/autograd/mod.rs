//! A small reverse-mode autodiff engine over `[C, H, W]` tensors.
//!
//! Each training sample gets its own [`Tape`]; ops evaluate eagerly and
//! [`Tape::backward`] walks the recorded nodes in reverse.

pub mod kernels;
mod tape;

pub use tape::{sigmoid, softmax, Activation, Gradients, Tape, Var};
