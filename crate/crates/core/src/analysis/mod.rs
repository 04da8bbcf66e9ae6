//! Fitting, hypothesis tests and power analysis.

pub mod background;
pub mod fit;
pub mod hypothesis;
pub mod power;
pub mod stats;

pub use background::{estimate_background, estimate_background_before, pre_peak_window, BackgroundEstimate};
pub use fit::{
    fit_joint, fit_mle, gradient_check, FitResult, FitSpec, GradientCheck, InformationStatus, JointFit,
    Objective, ParamSpec, RateUnit, GRADIENT_CHECK_TOL,
};
pub use hypothesis::{lr_test_doubling, lr_test_rate_shift, TestResult};
pub use power::{power_scan, PowerCurve, PowerExperiment, PowerPoint, PowerScan};
