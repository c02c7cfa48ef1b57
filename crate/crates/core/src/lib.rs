//! Drop-a-few-observations sensitivity analysis for OLS, instrumental
//! variables, and general Z-estimators.
//!
//! The library approximates, via influence scores, how much a conclusion can
//! change when at most a fraction `alpha` of the sample is removed; verifies
//! the approximation by exact refits; and emits finite-sample error
//! certificates for the linear approximation.

pub mod certify;
pub mod data;
pub mod error;
pub mod influence;
pub mod metrics;
pub mod parallel;
pub mod sandwich;
pub mod simlab;
pub mod solve;

pub use data::{build_problem, load_csv, ColumnSchema, Dataset, ModelSpec, RegressionProblem};
pub use error::{Error, Result};
pub use influence::{
    influence_scores, make_qoi, InfluenceVector, QoiKind, QuantityOfInterest,
};
pub use metrics::{amis, apip, brute_force_mip, decompose, refit_lower_bound};
pub use sandwich::{noise_sigma, sandwich_covariance, SandwichOptions};
pub use solve::{fit, fit_iv, fit_ols, solve_zestimator, FitResult, WeightVector};
