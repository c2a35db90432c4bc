//! Calibration of time-of-flight depth cameras from checkerboard corners.
//!
//! The crate implements two calibration pipelines over the same camera
//! model:
//!
//! * [`traditional_calib`] — the classic color-camera scheme: homography
//!   initialization, per-image pose refinement and a global bundle over the
//!   2D reprojection objective;
//! * [`depth_calib`] — the depth-based scheme: the traditional bootstrap,
//!   plane-based denoising of the per-corner depth ([`depth_denoise`]), an
//!   iterative re-initialization of the intrinsics from 3D checker-square
//!   sizes, and a joint, variance-normalized optimization over 2D and depth
//!   residuals.
//!
//! [`synthetic`] generates groundtruth-known datasets and [`eval`] scores
//! calibrations against them and drives the benchmark grid.

pub mod board;
pub mod camera_model;
pub mod dataset;
pub mod depth_calib;
pub mod depth_denoise;
pub mod error;
pub mod eval;
pub mod pfm;
pub mod solvers;
pub mod synthetic;
pub mod traditional_calib;

pub use board::BoardGeometry;
pub use camera_model::{Distortion, Intrinsics, Pose};
pub use dataset::{CalibrationDataset, ImageObservations};
pub use error::{Error, Result};
pub use traditional_calib::CalibParams;
