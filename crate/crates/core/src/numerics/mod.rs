//! Dense tensors, the differentiation tape, and finite-difference checking.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_coords, CoordinateCheck, FiniteDiffReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
