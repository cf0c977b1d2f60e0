//! Dense `f64` arithmetic and a reverse-mode gradient tape.

mod functions;
mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use functions::{cross_entropy, masked_softmax_rows};
pub use gradcheck::{grad_check, relative_error};
pub use tape::{GradTape, Gradients, ParamId, Var};
pub use tensor::{matmul, matmul_bt, Tensor};
