//! Conditional average treatment effect (CATE) estimation for a randomized
//! trial that borrows strength from a large observational study, assuming
//! the arm-wise outcome models of the two populations differ in only a few
//! coefficients.
//!
//! * [`lasso`]: coordinate-descent LASSO with cross-validated penalty.
//! * [`data`]: study datasets, CSV I/O and stratified folds.
//! * [`sim`]: the synthetic data-generating processes and their ground truth.
//! * [`estimators`]: the five CATE estimators.
//! * [`eval`]: RMSE scoring, replicated experiments and reports.

pub mod data;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod lasso;
pub mod seed;
pub mod sim;

pub use error::{Error, Result};
