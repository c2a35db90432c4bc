//! Geometric camera model: rigid transforms, pinhole projection, radial and
//! tangential lens distortion, depth and depth-scaled back-projection.
//!
//! Conventions used throughout the crate:
//! * 3D coordinates, translations and depths are millimetres,
//! * image coordinates are pixels,
//! * depth is the Euclidean distance from the camera centre to the point,
//!   not the z coordinate,
//! * all functions here are pure; repeated calls with the same inputs give
//!   bit-identical outputs.

use nalgebra::{Matrix2, Matrix2x4, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Points closer than this (in z) to the camera plane count as behind it.
pub const BEHIND_CAMERA_EPS: f64 = 1e-9;

const UNDISTORT_MAX_ITERS: usize = 100;
const UNDISTORT_STEP_TOL: f64 = 1e-12;

/// Pinhole intrinsics with zero skew: focal lengths and principal point,
/// all in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy }
    }

    /// The 3x3 calibration matrix (skew fixed at zero).
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx.is_finite()
            && self.cy.is_finite()
    }
}

/// Lens distortion coefficients: `k1`, `k2` radial and `k3`, `k4` tangential,
/// applied in normalized image coordinates. The zero quadruple is a
/// distortion-free lens.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
}

impl Distortion {
    pub const ZERO: Distortion = Distortion {
        k1: 0.0,
        k2: 0.0,
        k3: 0.0,
        k4: 0.0,
    };

    pub fn new(k1: f64, k2: f64, k3: f64, k4: f64) -> Self {
        Self { k1, k2, k3, k4 }
    }
}

/// Rigid transform from the board's world frame to the camera frame:
/// a three-parameter axis-angle rotation plus a translation in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rvec: Vector3<f64>,
    pub t: Vector3<f64>,
}

impl Pose {
    pub fn new(rvec: Vector3<f64>, t: Vector3<f64>) -> Self {
        Self { rvec, t }
    }

    /// Materialize the rotation matrix.
    pub fn rotation(&self) -> Matrix3<f64> {
        rodrigues(&self.rvec)
    }
}

/// Skew-symmetric cross-product matrix of `v`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix from an axis-angle vector.
pub fn rodrigues(rvec: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = rvec.norm_squared();
    let k = skew(rvec);
    // sin(t)/t and (1-cos(t))/t^2, with series fallbacks near zero.
    let (a, b) = if theta2 < 1e-12 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Axis-angle vector from a rotation matrix. Rejects matrices that are not
/// orthonormal with determinant +1 (tolerance 1e-6). The returned vector has
/// norm in [0, pi]; at exactly pi the axis sign is arbitrary.
pub fn rodrigues_inv(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let gram = r.transpose() * r - Matrix3::identity();
    if gram.amax() > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
        return Err(Error::NonOrthonormalRotation);
    }
    let cos_theta = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    // vee(R - R^T) = 2 sin(theta) * axis
    let s = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if theta < 1e-7 {
        return Ok(s * 0.5);
    }
    if theta < std::f64::consts::PI - 1e-6 {
        return Ok(s * (theta / (2.0 * theta.sin())));
    }
    // Near pi the vee vector vanishes; recover the axis from
    // (R + I)/2 = axis * axis^T + O(pi - theta).
    let m = (r + Matrix3::identity()) * 0.5;
    let j = if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
        0
    } else if m[(1, 1)] >= m[(2, 2)] {
        1
    } else {
        2
    };
    let col: Vector3<f64> = m.column(j).into();
    let mut axis = col / col.norm();
    if axis.dot(&s) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// Rigid transform into the camera frame: `R(rvec) * x_w + t`.
pub fn world_to_camera(x_w: &Vector3<f64>, pose: &Pose) -> Vector3<f64> {
    pose.rotation() * x_w + pose.t
}

/// Perspective division onto the normalized image plane.
pub fn normalize(x_c: &Vector3<f64>) -> Result<Vector2<f64>> {
    if x_c.z <= BEHIND_CAMERA_EPS {
        return Err(Error::PointBehindCamera);
    }
    Ok(Vector2::new(x_c.x / x_c.z, x_c.y / x_c.z))
}

/// Forward distortion model in normalized coordinates.
pub fn distort(x_n: &Vector2<f64>, kc: &Distortion) -> Vector2<f64> {
    let (x, y) = (x_n.x, x_n.y);
    let r2 = x * x + y * y;
    let radial = 1.0 + kc.k1 * r2 + kc.k2 * r2 * r2;
    Vector2::new(
        x * (radial + 2.0 * kc.k3 * y) + kc.k4 * (r2 + 2.0 * x * x),
        y * (radial + 2.0 * kc.k4 * x) + kc.k3 * (r2 + 2.0 * y * y),
    )
}

/// Invert the distortion model by fixed-point iteration: subtract the
/// tangential part and divide by the radial factor, starting from the
/// distorted point itself.
pub fn undistort(x_d: &Vector2<f64>, kc: &Distortion) -> Result<Vector2<f64>> {
    let mut x = x_d.x;
    let mut y = x_d.y;
    for _ in 0..UNDISTORT_MAX_ITERS {
        let r2 = x * x + y * y;
        let radial = 1.0 + kc.k1 * r2 + kc.k2 * r2 * r2;
        let nx = (x_d.x - kc.k4 * (r2 + 2.0 * x * x)) / (radial + 2.0 * kc.k3 * y);
        let ny = (x_d.y - kc.k3 * (r2 + 2.0 * y * y)) / (radial + 2.0 * kc.k4 * x);
        if !nx.is_finite() || !ny.is_finite() {
            return Err(Error::NoConvergence);
        }
        let step = ((nx - x) * (nx - x) + (ny - y) * (ny - y)).sqrt();
        x = nx;
        y = ny;
        if step < UNDISTORT_STEP_TOL {
            return Ok(Vector2::new(x, y));
        }
    }
    Err(Error::NoConvergence)
}

/// Map distorted normalized coordinates to pixels.
pub fn pixel_from_distorted(x_d: &Vector2<f64>, k: &Intrinsics) -> Vector2<f64> {
    Vector2::new(k.fx * x_d.x + k.cx, k.fy * x_d.y + k.cy)
}

/// Inverse of [`pixel_from_distorted`]: pixels to distorted normalized
/// coordinates.
pub fn distorted_from_pixel(x_p: &Vector2<f64>, k: &Intrinsics) -> Vector2<f64> {
    Vector2::new((x_p.x - k.cx) / k.fx, (x_p.y - k.cy) / k.fy)
}

/// Full projection chain: world point to pixel.
pub fn project(
    x_w: &Vector3<f64>,
    pose: &Pose,
    k: &Intrinsics,
    kc: &Distortion,
) -> Result<Vector2<f64>> {
    let x_c = world_to_camera(x_w, pose);
    project_camera_point(&x_c, k, kc)
}

/// Projection of a point already expressed in the camera frame.
pub fn project_camera_point(
    x_c: &Vector3<f64>,
    k: &Intrinsics,
    kc: &Distortion,
) -> Result<Vector2<f64>> {
    let x_n = normalize(x_c)?;
    Ok(pixel_from_distorted(&distort(&x_n, kc), k))
}

/// Euclidean camera-to-point distance, evaluated in the closed form
/// `sqrt(|x_w|^2 + |t|^2 + 2 t . R x_w)`, which equals `|R x_w + t|`.
pub fn depth_of(x_w: &Vector3<f64>, pose: &Pose) -> f64 {
    let r = pose.rotation();
    let s = x_w.norm_squared() + pose.t.norm_squared() + 2.0 * pose.t.dot(&(r * x_w));
    s.max(0.0).sqrt()
}

/// Back-project a pixel with known depth into the camera frame. The result
/// has norm exactly `depth` and projects back to `x_p`.
pub fn back_project(
    x_p: &Vector2<f64>,
    depth: f64,
    k: &Intrinsics,
    kc: &Distortion,
) -> Result<Vector3<f64>> {
    if !depth.is_finite() || depth <= 0.0 {
        return Err(Error::NonPositiveDepth(depth));
    }
    let x_n = undistort(&distorted_from_pixel(x_p, k), kc)?;
    let v = Vector3::new(x_n.x, x_n.y, 1.0);
    Ok(v * (depth / v.norm()))
}

/// Unit ray through a pixel, after undistortion.
pub fn pixel_ray(x_p: &Vector2<f64>, k: &Intrinsics, kc: &Distortion) -> Result<Vector3<f64>> {
    let x_n = undistort(&distorted_from_pixel(x_p, k), kc)?;
    let v = Vector3::new(x_n.x, x_n.y, 1.0);
    Ok(v / v.norm())
}

// ---------------------------------------------------------------------------
// Derivatives used by the analytic Jacobians of the calibration objectives.
// ---------------------------------------------------------------------------

/// Right Jacobian of the SO(3) exponential map, so that for a small delta
/// `R(rvec + delta) ~ R(rvec) * exp(skew(J_r(rvec) * delta))` and hence
/// `d(R(rvec) p)/d rvec = -R(rvec) * skew(p) * J_r(rvec)`.
pub fn so3_right_jacobian(rvec: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = rvec.norm_squared();
    let k = skew(rvec);
    let (a, b) = if theta2 < 1e-12 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() - k * a + k * k * b
}

/// Partial derivatives of the distorted coordinates with respect to the
/// normalized coordinates.
pub fn distort_jacobian_point(x_n: &Vector2<f64>, kc: &Distortion) -> Matrix2<f64> {
    let (x, y) = (x_n.x, x_n.y);
    let r2 = x * x + y * y;
    let radial = 1.0 + kc.k1 * r2 + kc.k2 * r2 * r2;
    let dr = 2.0 * kc.k1 + 4.0 * kc.k2 * r2; // d(radial)/d(r2) * 2
    let dxx = radial + 2.0 * kc.k3 * y + x * x * dr + 6.0 * kc.k4 * x;
    let dxy = x * y * dr + 2.0 * kc.k3 * x + 2.0 * kc.k4 * y;
    let dyx = dxy;
    let dyy = radial + 2.0 * kc.k4 * x + y * y * dr + 6.0 * kc.k3 * y;
    Matrix2::new(dxx, dxy, dyx, dyy)
}

/// Partial derivatives of the distorted coordinates with respect to the four
/// distortion coefficients, columns ordered `k1, k2, k3, k4`.
pub fn distort_jacobian_coeffs(x_n: &Vector2<f64>) -> Matrix2x4<f64> {
    let (x, y) = (x_n.x, x_n.y);
    let r2 = x * x + y * y;
    let r4 = r2 * r2;
    Matrix2x4::new(
        x * r2,
        x * r4,
        2.0 * x * y,
        r2 + 2.0 * x * x,
        y * r2,
        y * r4,
        r2 + 2.0 * y * y,
        2.0 * x * y,
    )
}
