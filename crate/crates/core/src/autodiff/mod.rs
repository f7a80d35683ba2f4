//! Dense tensors and a dynamic reverse-mode tape.

mod gradcheck;
pub(crate) mod tape;
mod tensor;

pub use gradcheck::{central_differences, check_gradients, compare, GradReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
