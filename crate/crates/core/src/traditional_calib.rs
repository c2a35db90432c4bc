//! Baseline color-style calibration: homography initialization, per-image
//! pose refinement, and a global bundle over the 2D reprojection objective.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::board::BoardGeometry;
use crate::camera_model::{
    self, distort, distort_jacobian_coeffs, distort_jacobian_point, normalize,
    rodrigues, skew, so3_right_jacobian, Distortion, Intrinsics, Pose,
};
use crate::dataset::CalibrationDataset;
use crate::error::{Error, Result};
use crate::solvers::{
    decompose_homography, estimate_homography, intrinsics_from_homographies, lm_solve, LmOptions,
    LmReport,
};

/// The full unknown vector of the calibration problem: intrinsics,
/// distortion, and one pose per image.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibParams {
    pub intrinsics: Intrinsics,
    pub distortion: Distortion,
    pub poses: Vec<Pose>,
}

impl CalibParams {
    /// Number of scalar parameters for `n_images` poses.
    pub fn len_for(n_images: usize) -> usize {
        8 + 6 * n_images
    }

    /// Flatten as `[fx, fy, cx, cy, k1..k4, (rvec, t) per image]`.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(Self::len_for(self.poses.len()));
        v[0] = self.intrinsics.fx;
        v[1] = self.intrinsics.fy;
        v[2] = self.intrinsics.cx;
        v[3] = self.intrinsics.cy;
        v[4] = self.distortion.k1;
        v[5] = self.distortion.k2;
        v[6] = self.distortion.k3;
        v[7] = self.distortion.k4;
        for (j, pose) in self.poses.iter().enumerate() {
            let base = 8 + 6 * j;
            for c in 0..3 {
                v[base + c] = pose.rvec[c];
                v[base + 3 + c] = pose.t[c];
            }
        }
        v
    }

    pub fn from_vector(v: &DVector<f64>, n_images: usize) -> Self {
        assert_eq!(v.len(), Self::len_for(n_images));
        let mut poses = Vec::with_capacity(n_images);
        for j in 0..n_images {
            let base = 8 + 6 * j;
            poses.push(Pose::new(
                Vector3::new(v[base], v[base + 1], v[base + 2]),
                Vector3::new(v[base + 3], v[base + 4], v[base + 5]),
            ));
        }
        Self {
            intrinsics: Intrinsics::new(v[0], v[1], v[2], v[3]),
            distortion: Distortion::new(v[4], v[5], v[6], v[7]),
            poses,
        }
    }
}

/// Per-corner projection and its derivatives with respect to the intrinsic,
/// distortion and pose blocks. Reused by every objective that contains 2D
/// reprojection terms.
pub(crate) struct ProjectionDerivatives {
    /// d pixel / d (fx, fy, cx, cy)
    pub d_intrinsics: nalgebra::Matrix2x4<f64>,
    /// d pixel / d (k1, k2, k3, k4)
    pub d_distortion: nalgebra::Matrix2x4<f64>,
    /// d pixel / d (rvec, t)
    pub d_pose: nalgebra::Matrix2x6<f64>,
}

/// Per-image quantities that depend only on the pose.
pub(crate) struct PoseContext {
    pub rotation: Matrix3<f64>,
    pub right_jacobian: Matrix3<f64>,
}

impl PoseContext {
    pub fn new(pose: &Pose) -> Self {
        Self {
            rotation: rodrigues(&pose.rvec),
            right_jacobian: so3_right_jacobian(&pose.rvec),
        }
    }
}

/// Projection chain with analytic derivatives. Returns `None` when the point
/// lands behind the camera.
pub(crate) fn project_with_derivatives(
    x_w: &Vector3<f64>,
    pose: &Pose,
    ctx: &PoseContext,
    k: &Intrinsics,
    kc: &Distortion,
) -> Option<ProjectionDerivatives> {
    let x_c = ctx.rotation * x_w + pose.t;
    let x_n = normalize(&x_c).ok()?;
    let x_d = distort(&x_n, kc);

    // d pixel / d (fx, fy, cx, cy)
    let d_intrinsics =
        nalgebra::Matrix2x4::new(x_d.x, 0.0, 1.0, 0.0, 0.0, x_d.y, 0.0, 1.0);

    let focal = Matrix2::new(k.fx, 0.0, 0.0, k.fy);
    // d pixel / d kc
    let d_distortion = focal * distort_jacobian_coeffs(&x_n);

    // d pixel / d x_c through the normalization and distortion.
    let z_inv = 1.0 / x_c.z;
    let d_norm = Matrix2x3::new(
        z_inv,
        0.0,
        -x_c.x * z_inv * z_inv,
        0.0,
        z_inv,
        -x_c.y * z_inv * z_inv,
    );
    let d_pixel_xc = focal * distort_jacobian_point(&x_n, kc) * d_norm;

    // x_c = R x_w + t: d x_c / d rvec = -R [x_w]x J_r, d x_c / d t = I.
    let d_xc_rvec = -ctx.rotation * skew(x_w) * ctx.right_jacobian;
    let d_rvec = d_pixel_xc * d_xc_rvec;

    let mut d_pose = nalgebra::Matrix2x6::zeros();
    d_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&d_rvec);
    d_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_pixel_xc);

    Some(ProjectionDerivatives {
        d_intrinsics,
        d_distortion,
        d_pose,
    })
}

/// Stacked 2D reprojection residuals `projected - measured` in pixels,
/// image-major, corner-minor, with the x component before y. The squared
/// norm of this vector is the calibration cost.
pub fn reprojection_residuals(params: &CalibParams, dataset: &CalibrationDataset) -> DVector<f64> {
    let corners_w = dataset.board.world_corners();
    let m = corners_w.len();
    let mut r = DVector::zeros(2 * m * params.poses.len());
    for (j, (pose, image)) in params.poses.iter().zip(dataset.images.iter()).enumerate() {
        for (i, x_w) in corners_w.iter().enumerate() {
            let row = 2 * (j * m + i);
            match camera_model::project(x_w, pose, &params.intrinsics, &params.distortion) {
                Ok(px) => {
                    let d = px - image.corners_px[i];
                    r[row] = d.x;
                    r[row + 1] = d.y;
                }
                Err(_) => {
                    r[row] = f64::NAN;
                    r[row + 1] = f64::NAN;
                }
            }
        }
    }
    r
}

/// Analytic Jacobian of [`reprojection_residuals`] with the same stacking
/// order and the parameter layout of [`CalibParams::to_vector`].
pub fn reprojection_jacobian(params: &CalibParams, dataset: &CalibrationDataset) -> DMatrix<f64> {
    let corners_w = dataset.board.world_corners();
    let m = corners_w.len();
    let n_images = params.poses.len();
    let mut jac = DMatrix::zeros(2 * m * n_images, CalibParams::len_for(n_images));
    for (j, pose) in params.poses.iter().enumerate() {
        let ctx = PoseContext::new(pose);
        let pose_col = 8 + 6 * j;
        for (i, x_w) in corners_w.iter().enumerate() {
            let row = 2 * (j * m + i);
            let Some(d) =
                project_with_derivatives(x_w, pose, &ctx, &params.intrinsics, &params.distortion)
            else {
                for c in 0..jac.ncols() {
                    jac[(row, c)] = f64::NAN;
                    jac[(row + 1, c)] = f64::NAN;
                }
                continue;
            };
            jac.view_mut((row, 0), (2, 4)).copy_from(&d.d_intrinsics);
            jac.view_mut((row, 4), (2, 4)).copy_from(&d.d_distortion);
            jac.view_mut((row, pose_col), (2, 6)).copy_from(&d.d_pose);
        }
    }
    jac
}

/// Closed-form initialization: zero distortion, intrinsics from the
/// homography bootstrap, one decomposed pose per image.
pub fn init_params(dataset: &CalibrationDataset) -> Result<CalibParams> {
    if dataset.images.len() < 2 {
        return Err(Error::degenerate(
            "initialization needs at least 2 images",
        ));
    }
    if dataset.board.corner_count() < 4 {
        return Err(Error::degenerate(
            "initialization needs at least 4 corners per image",
        ));
    }
    let board_xy = dataset.board.plane_corners();
    let homographies = dataset
        .images
        .iter()
        .map(|img| estimate_homography(&board_xy, &img.corners_px))
        .collect::<Result<Vec<_>>>()?;
    let intrinsics = intrinsics_from_homographies(&homographies)?;
    let poses = homographies
        .iter()
        .map(|h| decompose_homography(h, &intrinsics))
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibParams {
        intrinsics,
        distortion: Distortion::ZERO,
        poses,
    })
}

/// Refine a single image's pose against its measured corners, holding the
/// intrinsics and distortion fixed.
pub fn local_optimize(
    board: &BoardGeometry,
    corners_px: &[Vector2<f64>],
    k: &Intrinsics,
    kc: &Distortion,
    pose0: &Pose,
    opts: &LmOptions,
) -> Result<Pose> {
    let corners_w = board.world_corners();
    let measured = corners_px.to_vec();
    let k = *k;
    let kc = *kc;
    let residual = {
        let corners_w = corners_w.clone();
        let measured = measured.clone();
        move |x: &DVector<f64>| {
            let pose = Pose::new(
                Vector3::new(x[0], x[1], x[2]),
                Vector3::new(x[3], x[4], x[5]),
            );
            let mut r = DVector::zeros(2 * corners_w.len());
            for (i, x_w) in corners_w.iter().enumerate() {
                match camera_model::project(x_w, &pose, &k, &kc) {
                    Ok(px) => {
                        let d = px - measured[i];
                        r[2 * i] = d.x;
                        r[2 * i + 1] = d.y;
                    }
                    Err(_) => {
                        r[2 * i] = f64::NAN;
                        r[2 * i + 1] = f64::NAN;
                    }
                }
            }
            r
        }
    };
    let jacobian = move |x: &DVector<f64>| {
        let pose = Pose::new(
            Vector3::new(x[0], x[1], x[2]),
            Vector3::new(x[3], x[4], x[5]),
        );
        let ctx = PoseContext::new(&pose);
        let mut jac = DMatrix::zeros(2 * corners_w.len(), 6);
        for (i, x_w) in corners_w.iter().enumerate() {
            match project_with_derivatives(x_w, &pose, &ctx, &k, &kc) {
                Some(d) => jac.view_mut((2 * i, 0), (2, 6)).copy_from(&d.d_pose),
                None => {
                    for c in 0..6 {
                        jac[(2 * i, c)] = f64::NAN;
                        jac[(2 * i + 1, c)] = f64::NAN;
                    }
                }
            }
        }
        jac
    };
    let mut x0 = DVector::zeros(6);
    for c in 0..3 {
        x0[c] = pose0.rvec[c];
        x0[3 + c] = pose0.t[c];
    }
    let (x, _) = lm_solve(residual, jacobian, x0, opts)?;
    Ok(Pose::new(
        Vector3::new(x[0], x[1], x[2]),
        Vector3::new(x[3], x[4], x[5]),
    ))
}

/// Bundle everything: minimize the summed squared 2D reprojection error over
/// all parameters at once.
pub fn global_optimize(
    dataset: &CalibrationDataset,
    v0: &CalibParams,
    opts: &LmOptions,
) -> Result<(CalibParams, LmReport)> {
    let n_images = v0.poses.len();
    let residual = {
        let dataset = dataset.clone();
        move |x: &DVector<f64>| {
            reprojection_residuals(&CalibParams::from_vector(x, n_images), &dataset)
        }
    };
    let jacobian = {
        let dataset = dataset.clone();
        move |x: &DVector<f64>| {
            reprojection_jacobian(&CalibParams::from_vector(x, n_images), &dataset)
        }
    };
    let (x, report) = lm_solve(residual, jacobian, v0.to_vector(), opts)?;
    Ok((CalibParams::from_vector(&x, n_images), report))
}

/// The full traditional pipeline: initialization, per-image local
/// optimization, then the global bundle.
pub fn calibrate_traditional(
    dataset: &CalibrationDataset,
    opts: &LmOptions,
) -> Result<(CalibParams, LmReport)> {
    let mut params = init_params(dataset)?;
    for (pose, image) in params.poses.iter_mut().zip(dataset.images.iter()) {
        *pose = local_optimize(
            &dataset.board,
            &image.corners_px,
            &params.intrinsics,
            &params.distortion,
            pose,
            opts,
        )?;
    }
    global_optimize(dataset, &params, opts)
}
