//! Dense matrices with reverse-mode gradient accumulation.

mod kernels;
pub mod tape;
pub mod tensor;

pub use tape::{gelu, Gradients, Tape, Var};
pub use tensor::Tensor;
