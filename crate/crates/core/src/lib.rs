//! Neural linear models with uncertainty-aware training, the baselines they are
//! compared against, and the benchmark / Bayesian-optimization harnesses.

pub mod baselines;
pub mod bayesopt;
pub mod bench;
pub mod blr;
pub mod error;
pub mod gp;
pub mod model;
pub mod net;
pub mod nlm;
pub mod numkit;
pub mod una;

pub use error::{Error, Result};
