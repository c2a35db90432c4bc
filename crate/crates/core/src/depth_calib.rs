//! Depth-based calibration: traditional bootstrap, plane-denoised corner
//! depths, iterative re-initialization of the intrinsics from 3D
//! checker-square sizes, distortion re-estimation and a joint,
//! variance-normalized global optimization over 2D and depth residuals.

use nalgebra::{DMatrix, DVector, Matrix2x4, Matrix3x2, Vector2, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::camera_model::{
    depth_of, distort_jacobian_point, distorted_from_pixel, rodrigues, skew, so3_right_jacobian,
    undistort, Distortion, Intrinsics, Pose,
};
use crate::dataset::{CalibrationDataset, ImageObservations};
use crate::depth_denoise::{planarize_depth, RansacOptions};
use crate::error::{Error, Result};
use crate::solvers::{lm_solve, LmOptions, LmReport};
use crate::traditional_calib::{
    calibrate_traditional, local_optimize, project_with_derivatives, reprojection_residuals,
    CalibParams, PoseContext,
};

/// Per-image noise scales used to normalize the mixed-unit joint objective:
/// `sigma_px[j]` in pixels for the 2D terms, `sigma_depth[j]` in mm for the
/// depth terms. Strictly positive (floored).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceWeights {
    pub sigma_px: Vec<f64>,
    pub sigma_depth: Vec<f64>,
}

/// The floor keeps the weights finite on noise-free data; it sits far below
/// any realistic measurement noise.
pub const VARIANCE_FLOOR: f64 = 1e-3;

/// One iteration of the intrinsics-update loop.
#[derive(Debug, Clone, Serialize)]
pub struct KUpdateState {
    pub iteration: usize,
    /// Per-image mean absolute deviation of neighbor distances from the
    /// square size, mm.
    pub errors_mm: Vec<f64>,
    pub converged: bool,
}

/// Options for the full depth-based pipeline.
#[derive(Debug, Clone, Serialize)]
pub struct DepthCalibOptions {
    pub lm: LmOptions,
    pub ransac: RansacOptions,
    /// Cap on the intrinsics-update loop.
    pub max_k_iterations: usize,
    /// An image counts as converged when its 3D error stays within this
    /// fraction of the square size; the loop stops once at least half the
    /// images qualify.
    pub k_tolerance_fraction: f64,
}

impl Default for DepthCalibOptions {
    fn default() -> Self {
        Self {
            lm: LmOptions::default(),
            ransac: RansacOptions::default(),
            max_k_iterations: 10,
            k_tolerance_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageCost {
    pub stage: String,
    pub cost: f64,
}

/// Everything the pipeline observed on the way: per-stage objective values,
/// the intrinsics-update trace, and whether that loop converged. The
/// few-corner regime may legitimately diverge, which must be visible here
/// rather than silent.
#[derive(Debug, Clone, Serialize)]
pub struct DepthCalibDiagnostics {
    pub stage_costs: Vec<StageCost>,
    pub k_update_trace: Vec<KUpdateState>,
    pub k_update_converged: bool,
    /// Images whose plane fit failed (or that had no depth map) and fell
    /// back to raw depths in the final planarization pass.
    pub planarize_fallback_images: Vec<usize>,
    /// Corners that fell back to the raw measurement inside otherwise
    /// successful planarizations (final pass).
    pub corner_fallbacks: usize,
    pub weights: Option<VarianceWeights>,
    pub global_report: Option<LmReport>,
}

impl DepthCalibDiagnostics {
    fn new() -> Self {
        Self {
            stage_costs: Vec::new(),
            k_update_trace: Vec::new(),
            k_update_converged: false,
            planarize_fallback_images: Vec::new(),
            corner_fallbacks: 0,
            weights: None,
            global_report: None,
        }
    }

    fn record(&mut self, stage: &str, cost: f64) {
        self.stage_costs.push(StageCost {
            stage: stage.to_string(),
            cost,
        });
    }
}

/// Raw measured depth for every corner of an image: the per-corner
/// measurements when present, otherwise the depth map sampled at the rounded
/// corner pixel (3x3 mean fallback for invalid pixels).
pub fn measured_corner_depths(image: &ImageObservations) -> Option<Vec<f64>> {
    if let Some(d) = &image.corner_depths {
        return Some(d.clone());
    }
    let map = image.depth_map.as_ref()?;
    let sample = |c: &Vector2<f64>| -> f64 {
        let (cx, cy) = (c.x.round(), c.y.round());
        if cx < 0.0 || cy < 0.0 {
            return f64::NAN;
        }
        let (x, y) = (cx as usize, cy as usize);
        let d = map.get(x, y);
        if d.is_finite() {
            return d;
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 {
                    continue;
                }
                let v = map.get(nx as usize, ny as usize);
                if v.is_finite() {
                    sum += v;
                    n += 1;
                }
            }
        }
        if n > 0 {
            sum / n as f64
        } else {
            f64::NAN
        }
    };
    Some(image.corners_px.iter().map(sample).collect())
}

/// Outcome of planarizing a whole dataset.
pub struct PlanarizedDataset {
    /// Denoised corner depths, per image.
    pub depths: Vec<Vec<f64>>,
    /// Per-image, per-corner: true when the corner kept its raw measurement.
    pub fallback: Vec<Vec<bool>>,
    /// Images that fell back entirely to raw depths.
    pub fallback_images: Vec<usize>,
    /// Total per-corner fallbacks inside successful planarizations.
    pub corner_fallbacks: usize,
}

/// Planarize every image of a dataset with the given calibration estimate.
/// Images without a usable depth source are an error; a failed plane fit
/// falls back to the raw corner depths for that image. Each image draws its
/// RANSAC randomness from a stream derived from `(opts.seed, image index)`,
/// so results do not depend on scheduling.
pub fn planarize_dataset(
    dataset: &CalibrationDataset,
    k: &Intrinsics,
    kc: &Distortion,
    opts: &RansacOptions,
) -> Result<PlanarizedDataset> {
    type ImageResult = (Vec<f64>, Vec<bool>, bool);
    let results: Vec<Result<ImageResult>> = dataset
        .images
        .par_iter()
        .enumerate()
        .map(|(j, image)| {
            let raw = measured_corner_depths(image).ok_or(Error::MissingDepth(j))?;
            if raw.iter().any(|d| !d.is_finite()) {
                return Err(Error::MissingDepth(j));
            }
            let all_fallback = vec![true; raw.len()];
            let Some(map) = &image.depth_map else {
                // Per-corner depths only: nothing to planarize against.
                return Ok((raw, all_fallback, true));
            };
            let image_opts = RansacOptions {
                seed: opts
                    .seed
                    .wrapping_add((j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                ..opts.clone()
            };
            match planarize_depth(
                &image.corners_px,
                &raw,
                dataset.board.rows,
                dataset.board.cols,
                dataset.board.white_parity,
                map,
                k,
                kc,
                &image_opts,
            ) {
                Ok(pl) => Ok((pl.depths, pl.fallback, false)),
                Err(Error::PlaneFitFailed(_)) => Ok((raw, all_fallback, true)),
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut depths = Vec::with_capacity(dataset.images.len());
    let mut fallback = Vec::with_capacity(dataset.images.len());
    let mut fallback_images = Vec::new();
    let mut corner_fallbacks = 0;
    for (j, r) in results.into_iter().enumerate() {
        let (d, flags, whole_image) = r?;
        if whole_image {
            fallback_images.push(j);
        } else {
            corner_fallbacks += flags.iter().filter(|f| **f).count();
        }
        depths.push(d);
        fallback.push(flags);
    }
    Ok(PlanarizedDataset {
        depths,
        fallback,
        fallback_images,
        corner_fallbacks,
    })
}

/// Back-projected corner and its derivative with respect to the four
/// intrinsics, holding the distortion fixed. The undistortion derivative
/// comes from the implicit function theorem on the forward model.
struct CornerBackProjection {
    point: Vector3<f64>,
    d_intrinsics: nalgebra::Matrix3x4<f64>,
}

fn back_project_with_intrinsics_jacobian(
    px: &Vector2<f64>,
    depth: f64,
    k: &Intrinsics,
    kc: &Distortion,
) -> Option<CornerBackProjection> {
    if !depth.is_finite() || depth <= 0.0 {
        return None;
    }
    let m = distorted_from_pixel(px, k);
    let x_n = undistort(&m, kc).ok()?;
    let w = Vector3::new(x_n.x, x_n.y, 1.0);
    let s = w.norm();
    let point = w * (depth / s);

    let mut d_point_xn = Matrix3x2::zeros();
    for j in 0..2 {
        let mut e = Vector3::zeros();
        e[j] = 1.0;
        let col = (e / s - w * (x_n[j] / (s * s * s))) * depth;
        d_point_xn.set_column(j, &col);
    }
    let d_xn_m = distort_jacobian_point(&x_n, kc).try_inverse()?;
    let d_m_k = Matrix2x4::new(
        -m.x / k.fx,
        0.0,
        -1.0 / k.fx,
        0.0,
        0.0,
        -m.y / k.fy,
        0.0,
        -1.0 / k.fy,
    );
    Some(CornerBackProjection {
        point,
        d_intrinsics: d_point_xn * d_xn_m * d_m_k,
    })
}

/// Residuals (and optionally the Jacobian over `[fx, fy, cx, cy]`) of the 3D
/// square-size objective: one row per 4-connected neighbor pair per image,
/// `|x_c_a - x_c_b| - csize`.
fn square_size_residuals(
    dataset: &CalibrationDataset,
    dhat: &[Vec<f64>],
    k: &Intrinsics,
    kc: &Distortion,
    jacobian: bool,
) -> (DVector<f64>, Option<DMatrix<f64>>) {
    let pairs = dataset.board.neighbor_pairs();
    let csize = dataset.board.square_size;
    let n_rows = pairs.len() * dataset.images.len();
    let mut r = DVector::zeros(n_rows);
    let mut jac = if jacobian {
        Some(DMatrix::zeros(n_rows, 4))
    } else {
        None
    };
    for (j, image) in dataset.images.iter().enumerate() {
        let backs: Vec<Option<CornerBackProjection>> = image
            .corners_px
            .iter()
            .zip(dhat[j].iter())
            .map(|(px, &d)| back_project_with_intrinsics_jacobian(px, d, k, kc))
            .collect();
        for (p, &(a, b)) in pairs.iter().enumerate() {
            let row = j * pairs.len() + p;
            match (&backs[a], &backs[b]) {
                (Some(pa), Some(pb)) => {
                    let delta = pa.point - pb.point;
                    let dist = delta.norm();
                    r[row] = dist - csize;
                    if let Some(jm) = jac.as_mut() {
                        if dist > 1e-12 {
                            let dir = delta / dist;
                            let grad = dir.transpose() * (pa.d_intrinsics - pb.d_intrinsics);
                            for c in 0..4 {
                                jm[(row, c)] = grad[c];
                            }
                        }
                    }
                }
                _ => {
                    r[row] = f64::NAN;
                    if let Some(jm) = jac.as_mut() {
                        for c in 0..4 {
                            jm[(row, c)] = f64::NAN;
                        }
                    }
                }
            }
        }
    }
    (r, jac)
}

/// Re-estimate the intrinsics by requiring back-projected 4-connected
/// neighbor corners to sit one square size apart in 3D, using the denoised
/// depths. Distortion and poses stay fixed.
pub fn update_k(
    dataset: &CalibrationDataset,
    dhat: &[Vec<f64>],
    k0: &Intrinsics,
    kc: &Distortion,
    opts: &LmOptions,
) -> Result<(Intrinsics, LmReport)> {
    let residual = {
        let dataset = dataset.clone();
        let dhat = dhat.to_vec();
        let kc = *kc;
        move |x: &DVector<f64>| {
            let k = Intrinsics::new(x[0], x[1], x[2], x[3]);
            square_size_residuals(&dataset, &dhat, &k, &kc, false).0
        }
    };
    let jacobian = {
        let dataset = dataset.clone();
        let dhat = dhat.to_vec();
        let kc = *kc;
        move |x: &DVector<f64>| {
            let k = Intrinsics::new(x[0], x[1], x[2], x[3]);
            square_size_residuals(&dataset, &dhat, &k, &kc, true)
                .1
                .unwrap()
        }
    };
    let x0 = DVector::from_vec(vec![k0.fx, k0.fy, k0.cx, k0.cy]);
    let (x, report) = lm_solve(residual, jacobian, x0, opts)?;
    Ok((Intrinsics::new(x[0], x[1], x[2], x[3]), report))
}

/// Per-image mean absolute deviation of 3D neighbor distances from the
/// square size, mm. Images whose corners cannot be back-projected report
/// infinity.
pub fn error_in_3d(
    dataset: &CalibrationDataset,
    dhat: &[Vec<f64>],
    k: &Intrinsics,
    kc: &Distortion,
) -> Vec<f64> {
    let pairs = dataset.board.neighbor_pairs();
    let (r, _) = square_size_residuals(dataset, dhat, k, kc, false);
    (0..dataset.images.len())
        .map(|j| {
            let mut sum = 0.0;
            for p in 0..pairs.len() {
                let v = r[j * pairs.len() + p];
                if !v.is_finite() {
                    return f64::INFINITY;
                }
                sum += v.abs();
            }
            sum / pairs.len() as f64
        })
        .collect()
}

/// Convergence rule for the intrinsics-update loop: at least half the images
/// (rounded up) must have their 3D error within `tolerance_fraction` of the
/// square size.
pub fn k_update_converged(errors_mm: &[f64], csize: f64, tolerance_fraction: f64) -> bool {
    let within = errors_mm
        .iter()
        .filter(|e| **e <= tolerance_fraction * csize)
        .count();
    within >= errors_mm.len().div_ceil(2)
}

/// Estimate the per-image noise scales from the residuals under `params`:
/// `sigma_px` is the RMS of the 2D residual components, `sigma_depth` the
/// RMS of the depth residuals against the denoised depths. Both floored at
/// [`VARIANCE_FLOOR`].
pub fn estimate_variances(
    dataset: &CalibrationDataset,
    dhat: &[Vec<f64>],
    params: &CalibParams,
) -> VarianceWeights {
    let corners_w = dataset.board.world_corners();
    let m = corners_w.len();
    let r2d = reprojection_residuals(params, dataset);
    let mut sigma_px = Vec::with_capacity(dataset.images.len());
    let mut sigma_depth = Vec::with_capacity(dataset.images.len());
    for (j, pose) in params.poses.iter().enumerate() {
        let mut sum2d = 0.0;
        for i in 0..2 * m {
            let v = r2d[2 * m * j + i];
            sum2d += if v.is_finite() { v * v } else { 0.0 };
        }
        sigma_px.push((sum2d / (2 * m) as f64).sqrt().max(VARIANCE_FLOOR));
        let mut sumd = 0.0;
        for (i, x_w) in corners_w.iter().enumerate() {
            let d = depth_of(x_w, pose) - dhat[j][i];
            sumd += d * d;
        }
        sigma_depth.push((sumd / m as f64).sqrt().max(VARIANCE_FLOOR));
    }
    VarianceWeights {
        sigma_px,
        sigma_depth,
    }
}

/// Joint residual vector: per corner `(dx/sigma_px, dy/sigma_px,
/// dd/sigma_depth)`, image-major, corner-minor. Its squared norm is the
/// variance-normalized joint objective.
pub fn depth_residuals(
    params: &CalibParams,
    dataset: &CalibrationDataset,
    dhat: &[Vec<f64>],
    weights: &VarianceWeights,
) -> DVector<f64> {
    let corners_w = dataset.board.world_corners();
    let m = corners_w.len();
    let mut r = DVector::zeros(3 * m * params.poses.len());
    for (j, (pose, image)) in params.poses.iter().zip(dataset.images.iter()).enumerate() {
        let inv_sx = 1.0 / weights.sigma_px[j];
        let inv_sd = 1.0 / weights.sigma_depth[j];
        for (i, x_w) in corners_w.iter().enumerate() {
            let row = 3 * (j * m + i);
            match crate::camera_model::project(x_w, pose, &params.intrinsics, &params.distortion)
            {
                Ok(px) => {
                    let d2 = px - image.corners_px[i];
                    r[row] = d2.x * inv_sx;
                    r[row + 1] = d2.y * inv_sx;
                }
                Err(_) => {
                    r[row] = f64::NAN;
                    r[row + 1] = f64::NAN;
                }
            }
            r[row + 2] = (depth_of(x_w, pose) - dhat[j][i]) * inv_sd;
        }
    }
    r
}

/// Analytic Jacobian of [`depth_residuals`] over the full parameter vector.
pub fn depth_jacobian(
    params: &CalibParams,
    dataset: &CalibrationDataset,
    weights: &VarianceWeights,
) -> DMatrix<f64> {
    let corners_w = dataset.board.world_corners();
    let m = corners_w.len();
    let n_images = params.poses.len();
    let mut jac = DMatrix::zeros(3 * m * n_images, CalibParams::len_for(n_images));
    for (j, pose) in params.poses.iter().enumerate() {
        let ctx = PoseContext::new(pose);
        let rot = rodrigues(&pose.rvec);
        let right_jac = so3_right_jacobian(&pose.rvec);
        let pose_col = 8 + 6 * j;
        let inv_sx = 1.0 / weights.sigma_px[j];
        let inv_sd = 1.0 / weights.sigma_depth[j];
        for (i, x_w) in corners_w.iter().enumerate() {
            let row = 3 * (j * m + i);
            match project_with_derivatives(x_w, pose, &ctx, &params.intrinsics, &params.distortion)
            {
                Some(d) => {
                    for c in 0..4 {
                        jac[(row, c)] = d.d_intrinsics[(0, c)] * inv_sx;
                        jac[(row + 1, c)] = d.d_intrinsics[(1, c)] * inv_sx;
                        jac[(row, 4 + c)] = d.d_distortion[(0, c)] * inv_sx;
                        jac[(row + 1, 4 + c)] = d.d_distortion[(1, c)] * inv_sx;
                    }
                    for c in 0..6 {
                        jac[(row, pose_col + c)] = d.d_pose[(0, c)] * inv_sx;
                        jac[(row + 1, pose_col + c)] = d.d_pose[(1, c)] * inv_sx;
                    }
                }
                None => {
                    for c in 0..jac.ncols() {
                        jac[(row, c)] = f64::NAN;
                        jac[(row + 1, c)] = f64::NAN;
                    }
                }
            }
            // Depth term: depends on the pose only.
            let x_c = rot * x_w + pose.t;
            let depth = x_c.norm();
            if depth > 1e-12 {
                let dir = (x_c / depth).transpose();
                let d_rvec = dir * (-rot * skew(x_w) * right_jac);
                for c in 0..3 {
                    jac[(row + 2, pose_col + c)] = d_rvec[c] * inv_sd;
                    jac[(row + 2, pose_col + 3 + c)] = dir[c] * inv_sd;
                }
            }
        }
    }
    jac
}

/// Minimize the joint objective over the distortion coefficients only,
/// holding everything else at the current estimate.
pub fn update_distortion(
    dataset: &CalibrationDataset,
    dhat: &[Vec<f64>],
    params: &CalibParams,
    weights: &VarianceWeights,
    opts: &LmOptions,
) -> Result<(Distortion, LmReport)> {
    let base = params.clone();
    let residual = {
        let dataset = dataset.clone();
        let dhat = dhat.to_vec();
        let weights = weights.clone();
        let base = base.clone();
        move |x: &DVector<f64>| {
            let mut p = base.clone();
            p.distortion = Distortion::new(x[0], x[1], x[2], x[3]);
            depth_residuals(&p, &dataset, &dhat, &weights)
        }
    };
    let jacobian = {
        let dataset = dataset.clone();
        let weights = weights.clone();
        let base = base.clone();
        move |x: &DVector<f64>| {
            let mut p = base.clone();
            p.distortion = Distortion::new(x[0], x[1], x[2], x[3]);
            let corners_w = dataset.board.world_corners();
            let m = corners_w.len();
            let mut jac = DMatrix::zeros(3 * m * p.poses.len(), 4);
            for (j, pose) in p.poses.iter().enumerate() {
                let ctx = PoseContext::new(pose);
                let inv_sx = 1.0 / weights.sigma_px[j];
                for (i, x_w) in corners_w.iter().enumerate() {
                    let row = 3 * (j * m + i);
                    match project_with_derivatives(x_w, pose, &ctx, &p.intrinsics, &p.distortion) {
                        Some(d) => {
                            for c in 0..4 {
                                jac[(row, c)] = d.d_distortion[(0, c)] * inv_sx;
                                jac[(row + 1, c)] = d.d_distortion[(1, c)] * inv_sx;
                            }
                        }
                        None => {
                            for c in 0..4 {
                                jac[(row, c)] = f64::NAN;
                                jac[(row + 1, c)] = f64::NAN;
                            }
                        }
                    }
                    // Depth rows do not depend on the distortion.
                }
            }
            jac
        }
    };
    let kc0 = params.distortion;
    let x0 = DVector::from_vec(vec![kc0.k1, kc0.k2, kc0.k3, kc0.k4]);
    let (x, report) = lm_solve(residual, jacobian, x0, opts)?;
    Ok((Distortion::new(x[0], x[1], x[2], x[3]), report))
}

/// Joint global bundle over all parameters, with frozen weights.
pub fn global_optimize_depth(
    dataset: &CalibrationDataset,
    dhat: &[Vec<f64>],
    v0: &CalibParams,
    weights: &VarianceWeights,
    opts: &LmOptions,
) -> Result<(CalibParams, LmReport)> {
    let n_images = v0.poses.len();
    let residual = {
        let dataset = dataset.clone();
        let dhat = dhat.to_vec();
        let weights = weights.clone();
        move |x: &DVector<f64>| {
            depth_residuals(
                &CalibParams::from_vector(x, n_images),
                &dataset,
                &dhat,
                &weights,
            )
        }
    };
    let jacobian = {
        let dataset = dataset.clone();
        let weights = weights.clone();
        move |x: &DVector<f64>| {
            depth_jacobian(&CalibParams::from_vector(x, n_images), &dataset, &weights)
        }
    };
    let (x, report) = lm_solve(residual, jacobian, v0.to_vector(), opts)?;
    Ok((CalibParams::from_vector(&x, n_images), report))
}

/// The full depth-based pipeline. Every image must carry a depth source
/// (a depth map or per-corner depths). A non-converged intrinsics loop is
/// not an error: it is reported through the diagnostics.
pub fn depth_based_calib(
    dataset: &CalibrationDataset,
    opts: &DepthCalibOptions,
) -> Result<(CalibParams, DepthCalibDiagnostics)> {
    for (j, image) in dataset.images.iter().enumerate() {
        if image.depth_map.is_none() && image.corner_depths.is_none() {
            return Err(Error::MissingDepth(j));
        }
    }
    let mut diag = DepthCalibDiagnostics::new();

    let (mut params, color_report) =
        calibrate_traditional(dataset, &opts.lm).map_err(|e| Error::stage("color_calib", e))?;
    diag.record("color_calib", color_report.final_cost);

    // The distortion estimated by the bootstrap stays fixed until its own
    // re-estimation stage below.
    let kc0 = params.distortion;
    let mut planarized = planarize_dataset(dataset, &params.intrinsics, &kc0, &opts.ransac)
        .map_err(|e| Error::stage("planarize", e))?;

    // Iterative intrinsics re-initialization against the 3D square size.
    let csize = dataset.board.square_size;
    let mut converged = false;
    for count in 1..=opts.max_k_iterations {
        let (k_new, k_report) = update_k(
            dataset,
            &planarized.depths,
            &params.intrinsics,
            &kc0,
            &opts.lm,
        )
        .map_err(|e| Error::stage("update_k", e))?;
        params.intrinsics = k_new;
        diag.record(&format!("update_k_{count}"), k_report.final_cost);

        planarized = planarize_dataset(dataset, &params.intrinsics, &kc0, &opts.ransac)
            .map_err(|e| Error::stage("planarize", e))?;

        let errors = error_in_3d(dataset, &planarized.depths, &params.intrinsics, &kc0);
        converged = k_update_converged(&errors, csize, opts.k_tolerance_fraction);
        diag.k_update_trace.push(KUpdateState {
            iteration: count,
            errors_mm: errors,
            converged,
        });
        if converged {
            break;
        }
    }
    diag.k_update_converged = converged;
    diag.planarize_fallback_images = planarized.fallback_images.clone();
    diag.corner_fallbacks = planarized.corner_fallbacks;

    // Re-initialize the extrinsics under the updated intrinsics, the same
    // way the traditional pipeline does.
    let board_xy = dataset.board.plane_corners();
    let new_poses: Vec<Result<Pose>> = dataset
        .images
        .par_iter()
        .map(|image| {
            let h = crate::solvers::estimate_homography(&board_xy, &image.corners_px)?;
            let pose0 = crate::solvers::decompose_homography(&h, &params.intrinsics)?;
            local_optimize(
                &dataset.board,
                &image.corners_px,
                &params.intrinsics,
                &kc0,
                &pose0,
                &opts.lm,
            )
        })
        .collect();
    for (pose_slot, result) in params.poses.iter_mut().zip(new_poses) {
        *pose_slot = result.map_err(|e| Error::stage("local_optimize", e))?;
    }
    diag.record(
        "local_optimize",
        reprojection_residuals(&params, dataset).norm_squared(),
    );

    let weights = estimate_variances(dataset, &planarized.depths, &params);
    diag.weights = Some(weights.clone());

    let (kc_new, kc_report) =
        update_distortion(dataset, &planarized.depths, &params, &weights, &opts.lm)
            .map_err(|e| Error::stage("update_distortion", e))?;
    params.distortion = kc_new;
    diag.record("update_distortion", kc_report.final_cost);

    let (final_params, global_report) =
        global_optimize_depth(dataset, &planarized.depths, &params, &weights, &opts.lm)
            .map_err(|e| Error::stage("global_optimize", e))?;
    diag.record("global_optimize", global_report.final_cost);
    diag.global_report = Some(global_report);

    Ok((final_params, diag))
}
