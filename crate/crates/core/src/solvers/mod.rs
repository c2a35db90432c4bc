//! Numerical machinery shared by the calibration pipelines: normalized-DLT
//! homography estimation, the closed-form intrinsics bootstrap, homography
//! decomposition to pose, and a Levenberg-Marquardt engine with
//! caller-supplied analytic Jacobians.

mod homography;
mod lm;

pub use homography::{
    decompose_homography, estimate_homography, intrinsics_from_homographies, Homography,
};
pub use lm::{check_jacobian, lm_solve, LmOptions, LmReport, Termination};
