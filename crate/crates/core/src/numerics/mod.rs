//! Dense `f64` tensors with a define-by-run reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Values that do not require
//! gradients never record an op, and an inference tape records nothing, so
//! the same model code serves training, evaluation and timing.
//!
//! Every primitive fails fast with its name if it produces a non-finite
//! value.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, DEFAULT_EPS, REL_FLOOR};
pub(crate) use ops::softmax_in_place;
pub use tape::{Function, Gradients, Tape, Var};
pub use tensor::Tensor;
