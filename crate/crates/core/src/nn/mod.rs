//! Minimal dense numerics: matrices, feed-forward networks, reverse-mode
//! gradient accumulation on a tape, and the Adam optimizer.
//!
//! A model instance is single-threaded during forward/backward (the tape is
//! a mutable record); distinct instances are independent and may be trained
//! in parallel.

mod adam;
mod check;
mod matrix;
mod mlp;
mod store;
mod tape;

pub use adam::AdamState;
pub use check::gradient_check;
pub use matrix::Matrix;
pub use mlp::{mlp_eval, mlp_forward, Activation, MlpSpec, OutputActivation};
pub use store::ParamStore;
pub use tape::{softmax_in_place, Tape, Var};
