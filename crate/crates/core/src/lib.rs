//! Homogeneity tests for proportions in combined unilateral and bilateral
//! correlated binary data.
//!
//! Likelihood ratio, Wald-type and score tests under Rosner's constant-`R`
//! and Donner's constant-`rho` models, a GEE generalized score test, AIC
//! model comparison, and a Monte Carlo harness for type I error and power.

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b): (f64, f64) = ($a, $b);
        assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
    }};
}

pub mod chisq;
pub mod cli;
pub mod error;
pub mod gee;
pub mod hypothesis;
pub mod io;
pub mod mle;
pub mod report;
pub mod model;
pub mod sim;

mod linalg;

pub use error::{Error, Result};
pub use model::{CombinedCounts, GroupCounts, JointProbs, ModelKind, ModelParams};
