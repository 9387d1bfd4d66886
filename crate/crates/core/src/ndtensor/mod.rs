//! Minimal dense tensors with a reverse-mode autodiff tape.

mod gradcheck;
mod op;
pub(crate) mod shape;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use op::{Attrs, Op};
pub use tape::{Gradients, Tape, TapeNode, Var};
pub use tensor::{substream, DType, Element, Init, Tensor};
pub(crate) use tensor::uniform_vec;
