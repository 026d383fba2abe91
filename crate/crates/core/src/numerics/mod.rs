//! Dense arrays, seeded random streams and the finite-difference oracle.

mod gradcheck;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use rng::RngStream;
pub use tensor::{Tensor, MXN1_MAGIC};
