//! Dense tensors, reverse-mode differentiation, seeded randomness and the
//! interpolation kernels the rest of the crate builds on.

pub mod gradcheck;
pub mod interp;
pub mod kernels;
pub mod real;
pub mod record;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_single, grad_check_with, GradCheckReport, Stencil};
pub use interp::bicubic_resize_2d;
pub use kernels::{cross_entropy_rows, l2_normalize_rows, softmax_t};
pub use real::{DType, Real};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
