//! Small dense-array toolkit for training desk-scale transformer models.
//!
//! * [`Tensor`]: row-major `f64` arrays.
//! * [`Tape`]: reverse-mode recording of one forward pass.
//! * [`ParamStore`]: named parameters with accumulated gradients.
//! * [`grad_check`]: finite-difference verification of tape gradients.
//! * [`Checkpoint`]: binary container for named arrays plus a JSON manifest.

mod array;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod param;
mod tape;

pub use array::Tensor;
pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{softmax_in_place, Gradients, Tape, UnaryBackward, Var};
