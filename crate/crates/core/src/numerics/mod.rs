//! Deterministic numeric kernel: tensors, dense ops, Adam, seeded streams and
//! a finite-difference gradient checker.

mod adam;
mod gradcheck;
pub mod ops;
mod rng;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{finite_diff_check, FD_STEP};
pub use ops::{matmul, matmul_nt, matmul_tn, softmax};
pub use rng::{hash_tag, Rng};
pub use tensor::{Real, Tensor};
