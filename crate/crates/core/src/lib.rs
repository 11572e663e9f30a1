//! Multivariate skewed variance-gamma (VG) fitting by maximizing the
//! leave-one-out (LOO) likelihood, with a simulation harness for the rate of
//! convergence of the location estimator.

pub mod ecm;
pub mod error;
pub mod loo;
pub mod report;
pub mod special_fn;
pub mod study;
pub mod summary;
pub mod vg_model;

pub use ecm::{fit, fit_location_only, initialize, EcmConfig, FitResult, FixedMask, LocationFit, Termination};
pub use error::{Error, Result};
pub use loo::{loo_index, loo_loglik};
pub use study::{run_rate_study, RateStudyResult, StudySpec};
pub use vg_model::{Dataset, VgParams};
