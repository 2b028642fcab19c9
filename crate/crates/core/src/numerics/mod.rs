//! Dense linear algebra, activation/loss primitives, Adam, a seeded RNG and a
//! finite-difference gradient checker. All arithmetic is `f64`.

mod adam;
mod gradcheck;
mod matrix;
mod ops;
mod rng;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{check_gradient, check_gradient_at, GradCheck};
pub use matrix::{cholesky_solve, orthonormalize_rows, Matrix};
pub use ops::{
    argmax, cross_entropy, dot, l2_norm, l2_normalize, log_sum_exp, softmax, Normalized, NORM_EPSILON,
};
pub use rng::Rng;
