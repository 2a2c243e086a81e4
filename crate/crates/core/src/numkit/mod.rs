//! Dense linear algebra and seeded random streams shared by every model.
//!
//! Matrices are row-major `f64`. Everything that needs an inverse goes through
//! a Cholesky factor with a small jitter ladder for near-singular Gram matrices.

mod linalg;
mod mat;
mod rng;
mod stats;

pub use linalg::{cholesky, solve_psd, solve_psd_vec, Cholesky, JITTER_LADDER};
pub use mat::{dot, norm2, Mat};
pub use rng::RngStream;
pub use stats::{mean, percentile, std_pop};
