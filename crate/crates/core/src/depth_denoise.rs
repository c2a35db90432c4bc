//! Plane-based denoising of checkerboard depth: segment the white checker
//! squares, lift their depth pixels to 3D, fit the board plane robustly
//! (RANSAC over a gradient-filtered pixel set, refined by a total
//! least-squares SVD fit) and re-derive each sub-pixel corner's depth by
//! ray-plane intersection.

use nalgebra::{DMatrix, Vector2, Vector3};
use rand::Rng as _;
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera_model::{back_project, pixel_ray, Distortion, Intrinsics};
use crate::error::{Error, Result};

/// Fraction of the cell edge trimmed away on each side before sampling
/// depth pixels, keeping samples clear of the black/white transitions where
/// TOF mixing corrupts depth.
const QUAD_INSET_FRACTION: f64 = 0.15;

/// Row-major grid of depth values in millimetres. Invalid pixels are
/// non-finite; valid entries are strictly positive. Pixel `(x, y)` samples
/// the ray through pixel coordinates exactly `(x, y)`.
///
/// Equality is bitwise, so two maps with invalid pixels in the same places
/// compare equal.
#[derive(Debug, Clone)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl PartialEq for DepthMap {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl DepthMap {
    /// An all-invalid map.
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "depth map dimensions must be positive");
        Self {
            width,
            height,
            data: vec![f64::NAN; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Parse(format!(
                "depth map payload has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Depth at an integer pixel; NaN when out of bounds or invalid.
    pub fn get(&self, x: usize, y: usize) -> f64 {
        if x < self.width && y < self.height {
            self.data[y * self.width + x]
        } else {
            f64::NAN
        }
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| v.is_finite()).count()
    }
}

/// A plane `{x : n . x = rho}` in the camera frame with unit normal and the
/// canonical sign `rho >= 0` (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub rho: f64,
}

impl Plane {
    /// Canonicalize any scaling of the pair `(normal, rho)` describing
    /// `{x : normal . x = rho}`: unit normal, `rho >= 0`.
    pub fn new(normal: Vector3<f64>, rho: f64) -> Self {
        let len = normal.norm();
        let n = normal / len;
        let rho = rho / len;
        if rho < 0.0 {
            Self {
                normal: -n,
                rho: -rho,
            }
        } else {
            Self { normal: n, rho }
        }
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.rho
    }
}

/// RANSAC controls for the per-image board-plane fit.
#[derive(Debug, Clone, Serialize)]
pub struct RansacOptions {
    pub iterations: usize,
    /// Point-to-plane distance for the inlier vote, mm.
    pub inlier_threshold: f64,
    /// Reject the fit when the best consensus covers less than this fraction
    /// of the points.
    pub min_inlier_fraction: f64,
    /// Forward-difference depth gradient magnitude above which a pixel is
    /// dropped before plane fitting, mm per pixel.
    pub gradient_threshold: f64,
    pub seed: u64,
}

impl Default for RansacOptions {
    fn default() -> Self {
        Self {
            iterations: 200,
            inlier_threshold: 15.0,
            min_inlier_fraction: 0.5,
            gradient_threshold: 20.0,
            seed: 0,
        }
    }
}

/// Four pixel-space corners of one (inset) checker cell.
pub type Quad = [Vector2<f64>; 4];

/// Checker cells whose color parity matches `parity`, as quadrilaterals
/// bounded by the four adjacent interior corners and shrunk by an inset
/// margin. `corners` is the full row-major `rows x cols` grid.
pub fn segment_white_squares(
    corners: &[Vector2<f64>],
    rows: usize,
    cols: usize,
    parity: u8,
) -> Result<Vec<Quad>> {
    if corners.len() != rows * cols {
        return Err(Error::GridIncomplete {
            expected: rows * cols,
            got: corners.len(),
        });
    }
    let m = QUAD_INSET_FRACTION;
    let mut quads = Vec::new();
    for i in 0..rows.saturating_sub(1) {
        for j in 0..cols.saturating_sub(1) {
            if (i + j) % 2 != parity as usize {
                continue;
            }
            let c00 = corners[i * cols + j];
            let c01 = corners[i * cols + j + 1];
            let c10 = corners[(i + 1) * cols + j];
            let c11 = corners[(i + 1) * cols + j + 1];
            // Bilinear parameterization of the cell; inset corners sit at
            // parameters m and 1-m.
            let bilinear = |u: f64, v: f64| -> Vector2<f64> {
                (c00 * (1.0 - u) + c01 * u) * (1.0 - v) + (c10 * (1.0 - u) + c11 * u) * v
            };
            quads.push([
                bilinear(m, m),
                bilinear(1.0 - m, m),
                bilinear(1.0 - m, 1.0 - m),
                bilinear(m, 1.0 - m),
            ]);
        }
    }
    Ok(quads)
}

/// Integer pixels whose centers lie inside the convex quad, clipped to the
/// image bounds.
pub fn pixels_in_quad(quad: &Quad, width: usize, height: usize) -> Vec<(usize, usize)> {
    let xs: Vec<f64> = quad.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = quad.iter().map(|p| p.y).collect();
    let x0 = xs.iter().cloned().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let y0 = ys.iter().cloned().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let x1 = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil();
    let y1 = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil();
    if !x1.is_finite() || !y1.is_finite() || x1 < 0.0 || y1 < 0.0 {
        return Vec::new();
    }
    let x1 = (x1 as usize).min(width.saturating_sub(1));
    let y1 = (y1 as usize).min(height.saturating_sub(1));

    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = Vector2::new(x as f64, y as f64);
            let mut pos = 0;
            let mut neg = 0;
            for k in 0..4 {
                let a = quad[k];
                let b = quad[(k + 1) % 4];
                let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
                if cross >= -1e-12 {
                    pos += 1;
                }
                if cross <= 1e-12 {
                    neg += 1;
                }
            }
            if pos == 4 || neg == 4 {
                out.push((x, y));
            }
        }
    }
    out
}

/// Keep pixels whose forward-difference depth gradient magnitude stays below
/// `threshold` (mm/px). Falls back to the backward difference at image or
/// validity borders; pixels with invalid depth are dropped.
pub fn gradient_filter(
    depth: &DepthMap,
    pixels: &[(usize, usize)],
    threshold: f64,
) -> Vec<(usize, usize)> {
    let diff = |center: f64, fwd: f64, bwd: f64| -> f64 {
        if fwd.is_finite() {
            fwd - center
        } else if bwd.is_finite() {
            center - bwd
        } else {
            0.0
        }
    };
    pixels
        .iter()
        .copied()
        .filter(|&(x, y)| {
            let d = depth.get(x, y);
            if !d.is_finite() {
                return false;
            }
            let gx = diff(
                d,
                depth.get(x + 1, y),
                if x > 0 { depth.get(x - 1, y) } else { f64::NAN },
            );
            let gy = diff(
                d,
                depth.get(x, y + 1),
                if y > 0 { depth.get(x, y - 1) } else { f64::NAN },
            );
            (gx * gx + gy * gy).sqrt() < threshold
        })
        .collect()
}

/// Back-project depth pixels into the camera frame.
pub fn lift_to_3d(
    pixels: &[(usize, usize)],
    depth: &DepthMap,
    k: &Intrinsics,
    kc: &Distortion,
) -> Result<Vec<Vector3<f64>>> {
    pixels
        .iter()
        .map(|&(x, y)| {
            back_project(
                &Vector2::new(x as f64, y as f64),
                depth.get(x, y),
                k,
                kc,
            )
        })
        .collect()
}

/// Total-least-squares plane through three or more points: the normal is the
/// singular vector of the mean-centred cloud with the smallest singular
/// value.
pub fn fit_plane_svd(points: &[Vector3<f64>]) -> Result<Plane> {
    if points.len() < 3 {
        return Err(Error::degenerate("plane fit needs at least 3 points"));
    }
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let mut a = DMatrix::zeros(points.len(), 3);
    for (i, p) in points.iter().enumerate() {
        let d = p - centroid;
        a[(i, 0)] = d.x;
        a[(i, 1)] = d.y;
        a[(i, 2)] = d.z;
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::numerical("SVD failed in plane fit"))?;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| {
        svd.singular_values[i]
            .partial_cmp(&svd.singular_values[j])
            .unwrap()
    });
    // Collinear clouds have two vanishing singular values.
    if svd.singular_values[order[1]] <= 1e-9 * svd.singular_values[order[2]].max(1e-300) {
        return Err(Error::degenerate("points are collinear"));
    }
    let row = v_t.row(order[0]);
    let normal = Vector3::new(row[0], row[1], row[2]);
    Ok(Plane::new(normal, normal.dot(&centroid)))
}

/// Robust plane fit: hypothesize from random point triples, vote with the
/// inlier threshold, then refit the best consensus set with
/// [`fit_plane_svd`]. Deterministic for a fixed seed. Returns the refit
/// plane and the consensus inlier indices.
pub fn ransac_plane(
    points: &[Vector3<f64>],
    opts: &RansacOptions,
) -> Result<(Plane, Vec<usize>)> {
    let n = points.len();
    if n < 3 {
        return Err(Error::InsufficientInliers { found: n, total: n });
    }
    let fraction_ok = opts.min_inlier_fraction > 0.0 && opts.min_inlier_fraction <= 1.0;
    if opts.iterations == 0
        || opts.inlier_threshold <= 0.0
        || !fraction_ok
        || opts.gradient_threshold <= 0.0
    {
        return Err(Error::numerical("invalid RANSAC options"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best_count = 0usize;
    let mut best_plane: Option<Plane> = None;
    for _ in 0..opts.iterations {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let l = rng.random_range(0..n);
        if i == j || j == l || i == l {
            continue;
        }
        let normal = (points[j] - points[i]).cross(&(points[l] - points[i]));
        if normal.norm() < 1e-12 {
            continue;
        }
        let plane = Plane::new(normal, normal.dot(&points[i]));
        let count = points
            .iter()
            .filter(|p| plane.signed_distance(p).abs() <= opts.inlier_threshold)
            .count();
        if count > best_count {
            best_count = count;
            best_plane = Some(plane);
        }
    }
    let plane = best_plane.ok_or(Error::InsufficientInliers { found: 0, total: n })?;
    if (best_count as f64) < opts.min_inlier_fraction * n as f64 || best_count < 3 {
        return Err(Error::InsufficientInliers {
            found: best_count,
            total: n,
        });
    }
    let inliers: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| plane.signed_distance(p).abs() <= opts.inlier_threshold)
        .map(|(i, _)| i)
        .collect();
    let inlier_points: Vec<Vector3<f64>> = inliers.iter().map(|&i| points[i]).collect();
    let refit = fit_plane_svd(&inlier_points)?;
    Ok((refit, inliers))
}

/// Depth of the intersection between the plane and the undistorted ray
/// through a (sub-pixel) corner. The returned value is the Euclidean
/// distance to the intersection point.
pub fn intersect_ray_plane(
    corner_px: &Vector2<f64>,
    plane: &Plane,
    k: &Intrinsics,
    kc: &Distortion,
) -> Result<f64> {
    let v = pixel_ray(corner_px, k, kc)?;
    let denom = plane.normal.dot(&v);
    if denom.abs() <= 1e-9 {
        return Err(Error::RayParallelToPlane);
    }
    let s = plane.rho / denom;
    if s <= 0.0 {
        return Err(Error::NegativeIntersection);
    }
    Ok(s)
}

/// Output of [`planarize_depth`]: one denoised depth per corner, with
/// corners that fell back to the raw measurement flagged.
#[derive(Debug, Clone)]
pub struct PlanarizedDepths {
    pub depths: Vec<f64>,
    pub fallback: Vec<bool>,
    pub plane: Plane,
    pub plane_inliers: usize,
}

/// Full per-image pipeline: segment white squares, gradient-filter their
/// depth pixels, lift to 3D, fit the board plane with RANSAC + SVD and
/// intersect each corner ray with it. Corners whose intersection fails fall
/// back to the raw measured depth `raw_depths[i]` and are flagged. A failed
/// plane fit surfaces as [`Error::PlaneFitFailed`], letting the caller fall
/// back to raw depths for the whole image.
#[allow(clippy::too_many_arguments)]
pub fn planarize_depth(
    corners: &[Vector2<f64>],
    raw_depths: &[f64],
    rows: usize,
    cols: usize,
    parity: u8,
    map: &DepthMap,
    k: &Intrinsics,
    kc: &Distortion,
    opts: &RansacOptions,
) -> Result<PlanarizedDepths> {
    let quads = segment_white_squares(corners, rows, cols, parity)?;
    let mut pixels = Vec::new();
    for quad in &quads {
        let in_quad = pixels_in_quad(quad, map.width(), map.height());
        pixels.extend(gradient_filter(map, &in_quad, opts.gradient_threshold));
    }
    if pixels.len() < 3 {
        return Err(Error::PlaneFitFailed(Box::new(Error::InsufficientInliers {
            found: pixels.len(),
            total: pixels.len(),
        })));
    }
    let points = lift_to_3d(&pixels, map, k, kc).map_err(|e| Error::PlaneFitFailed(Box::new(e)))?;
    let (plane, inliers) = match ransac_plane(&points, opts) {
        Ok(x) => x,
        Err(e) => return Err(Error::PlaneFitFailed(Box::new(e))),
    };
    let mut depths = Vec::with_capacity(corners.len());
    let mut fallback = Vec::with_capacity(corners.len());
    for (i, c) in corners.iter().enumerate() {
        match intersect_ray_plane(c, &plane, k, kc) {
            Ok(d) => {
                depths.push(d);
                fallback.push(false);
            }
            Err(_) => {
                depths.push(raw_depths[i]);
                fallback.push(true);
            }
        }
    }
    Ok(PlanarizedDepths {
        depths,
        fallback,
        plane,
        plane_inliers: inliers.len(),
    })
}
