//! Core building blocks for desk-scale MoE training: a reverse-mode tensor
//! tape, decoder blocks with rotary attention, shared/specialized expert
//! routing with its balancing losses, AdamW with staged schedules, and
//! sample packing.

pub mod error;
pub mod model;
pub mod moe;
pub mod optim;
pub mod packing;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Precision, Tape, Tensor, TensorError, Var};
