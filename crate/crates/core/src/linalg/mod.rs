//! Dense linear algebra and reverse-mode differentiation.

mod gradcheck;
mod matrix;
mod spd;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::argmax;
pub use matrix::DenseMatrix;
pub use spd::{factor_with_jitter, spd_solve, Cholesky};
pub use tape::{log_softmax_rows, Gradients, Tape, Var};
