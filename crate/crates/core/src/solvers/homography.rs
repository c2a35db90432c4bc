//! Plane-to-image homographies: normalized DLT estimation, the zero-skew
//! closed-form intrinsics bootstrap, and decomposition to a rigid pose.

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};

use crate::camera_model::{rodrigues_inv, Intrinsics, Pose};
use crate::error::{Error, Result};

/// A 3x3 plane-to-image homography, defined up to scale and stored with the
/// bottom-right entry normalized to 1 whenever it is nonzero. Maps board
/// plane coordinates `(X, Y, 1)` to homogeneous pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Self {
        let h33 = m[(2, 2)];
        if h33.abs() > 1e-12 {
            Self(m / h33)
        } else {
            Self(m)
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Apply to a board-plane point, returning the dehomogenized pixel.
    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let q = self.0 * Vector3::new(p.x, p.y, 1.0);
        Vector2::new(q.x / q.z, q.y / q.z)
    }
}

/// Hartley normalization: translate the centroid to the origin and scale the
/// mean distance to sqrt(2).
fn normalizing_transform(pts: &[Vector2<f64>]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let centroid = pts.iter().sum::<Vector2<f64>>() / n;
    let mean_dist = pts.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    if mean_dist < 1e-12 {
        return Err(Error::degenerate("all points coincide"));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(
        s,
        0.0,
        -s * centroid.x,
        0.0,
        s,
        -s * centroid.y,
        0.0,
        0.0,
        1.0,
    ))
}

fn apply_transform(t: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = t * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Right-singular vector for the smallest singular value, plus diagnostics:
/// `(sigma_max, second_smallest, smallest, vector)`.
///
/// Wide systems are padded with zero rows first: the thin SVD of an `m x n`
/// matrix with `m < n` only exposes `m` right-singular vectors, which hides
/// the nullspace of exactly-determined problems.
fn smallest_singular_vector(a: &DMatrix<f64>) -> Result<(f64, f64, f64, DVector<f64>)> {
    let a = if a.nrows() < a.ncols() {
        a.clone().resize(a.ncols(), a.ncols(), 0.0)
    } else {
        a.clone()
    };
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::numerical("SVD failed to produce right singular vectors"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[i]
            .partial_cmp(&svd.singular_values[j])
            .unwrap()
    });
    let smallest = order[0];
    let second = order.get(1).copied().unwrap_or(smallest);
    let largest = *order.last().unwrap();
    Ok((
        svd.singular_values[largest],
        svd.singular_values[second],
        svd.singular_values[smallest],
        v_t.row(smallest).transpose(),
    ))
}

/// Estimate the homography mapping board-plane points (mm) to image pixels
/// using the normalized DLT. Requires at least four correspondences in
/// general position.
pub fn estimate_homography(
    board_pts: &[Vector2<f64>],
    image_pts: &[Vector2<f64>],
) -> Result<Homography> {
    if board_pts.len() != image_pts.len() {
        return Err(Error::degenerate(format!(
            "correspondence count mismatch: {} board vs {} image points",
            board_pts.len(),
            image_pts.len()
        )));
    }
    if board_pts.len() < 4 {
        return Err(Error::degenerate("need at least 4 correspondences"));
    }
    let t_board = normalizing_transform(board_pts)?;
    let t_image = normalizing_transform(image_pts)?;

    let n = board_pts.len();
    let mut a = DMatrix::zeros(2 * n, 9);
    for (i, (b, p)) in board_pts.iter().zip(image_pts.iter()).enumerate() {
        let b = apply_transform(&t_board, b);
        let p = apply_transform(&t_image, p);
        let (x, y, u, v) = (b.x, b.y, p.x, p.y);
        let r0 = 2 * i;
        a[(r0, 0)] = x;
        a[(r0, 1)] = y;
        a[(r0, 2)] = 1.0;
        a[(r0, 6)] = -u * x;
        a[(r0, 7)] = -u * y;
        a[(r0, 8)] = -u;
        let r1 = r0 + 1;
        a[(r1, 3)] = x;
        a[(r1, 4)] = y;
        a[(r1, 5)] = 1.0;
        a[(r1, 6)] = -v * x;
        a[(r1, 7)] = -v * y;
        a[(r1, 8)] = -v;
    }
    let (sigma_max, sigma_second, _, h) = smallest_singular_vector(&a)?;
    // A collinear configuration leaves a nullspace of dimension >= 2.
    if sigma_second < 1e-9 * sigma_max {
        return Err(Error::degenerate(
            "correspondences are collinear or otherwise rank deficient",
        ));
    }
    let h_norm = Matrix3::from_row_slice(h.as_slice());
    let h_full = t_image
        .try_inverse()
        .ok_or_else(|| Error::numerical("normalization transform not invertible"))?
        * h_norm
        * t_board;
    if h_full.determinant().abs() < 1e-15 {
        return Err(Error::degenerate("estimated homography is singular"));
    }
    Ok(Homography::new(h_full))
}

/// Closed-form zero-skew intrinsics from two or more homographies of the
/// same plane seen under distinct orientations. Solves the reduced
/// absolute-conic system with the skew entry eliminated.
pub fn intrinsics_from_homographies(hs: &[Homography]) -> Result<Intrinsics> {
    if hs.len() < 2 {
        return Err(Error::degenerate(
            "need at least 2 homographies to bootstrap intrinsics",
        ));
    }
    // b = (B11, B22, B13, B23, B33) parameterizes the image of the absolute
    // conic with zero skew. Each homography contributes two constraints.
    let v = |h: &Matrix3<f64>, i: usize, j: usize| -> [f64; 5] {
        let hi = h.column(i);
        let hj = h.column(j);
        [
            hi[0] * hj[0],
            hi[1] * hj[1],
            hi[2] * hj[0] + hi[0] * hj[2],
            hi[2] * hj[1] + hi[1] * hj[2],
            hi[2] * hj[2],
        ]
    };
    let mut a = DMatrix::zeros(2 * hs.len(), 5);
    for (row, h) in hs.iter().enumerate() {
        let m = h.matrix();
        let v12 = v(m, 0, 1);
        let v11 = v(m, 0, 0);
        let v22 = v(m, 1, 1);
        for col in 0..5 {
            a[(2 * row, col)] = v12[col];
            a[(2 * row + 1, col)] = v11[col] - v22[col];
        }
    }
    let (sigma_max, sigma_second, _, b) = smallest_singular_vector(&a)?;
    // Need rank 4: parallel board orientations collapse the system.
    if sigma_second < 1e-9 * sigma_max {
        return Err(Error::degenerate(
            "board orientations do not constrain the intrinsics (parallel planes?)",
        ));
    }
    let (b11, b22, b13, b23, b33) = (b[0], b[1], b[2], b[3], b[4]);
    let cx = -b13 / b11;
    let cy = -b23 / b22;
    let lambda = b33 - (b13 * b13 / b11 + b23 * b23 / b22);
    let fx2 = lambda / b11;
    let fy2 = lambda / b22;
    if !(fx2 > 0.0 && fy2 > 0.0) || !fx2.is_finite() || !fy2.is_finite() {
        return Err(Error::degenerate(
            "absolute-conic solution does not yield a real camera",
        ));
    }
    let k = Intrinsics::new(fx2.sqrt(), fy2.sqrt(), cx, cy);
    if !k.is_valid() {
        return Err(Error::degenerate("bootstrap produced invalid intrinsics"));
    }
    Ok(k)
}

/// Recover the rigid pose from a homography given the intrinsics. The
/// rotation is re-projected onto SO(3) (orthogonal Procrustes) and the
/// translation sign is fixed so the board lies in front of the camera.
pub fn decompose_homography(h: &Homography, k: &Intrinsics) -> Result<Pose> {
    let k_inv = k
        .matrix()
        .try_inverse()
        .ok_or_else(|| Error::degenerate("intrinsics matrix not invertible"))?;
    let a = k_inv * h.matrix();
    let n1 = a.column(0).norm();
    if n1 < 1e-12 || !n1.is_finite() {
        return Err(Error::degenerate("homography column collapsed"));
    }
    let mut scale = 1.0 / n1;
    let mut t: Vector3<f64> = a.column(2) * scale;
    if t.z < 0.0 {
        scale = -scale;
        t = -t;
    }
    let r1: Vector3<f64> = a.column(0) * scale;
    let r2: Vector3<f64> = a.column(1) * scale;
    let r3 = r1.cross(&r2);
    let r0 = Matrix3::from_columns(&[r1, r2, r3]);
    // Nearest rotation in Frobenius norm.
    let svd = r0.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::numerical("SVD failed"))?;
    let v_t = svd.v_t.ok_or_else(|| Error::numerical("SVD failed"))?;
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u_fixed = u;
        u_fixed.column_mut(2).neg_mut();
        r = u_fixed * v_t;
    }
    let rvec = rodrigues_inv(&r)?;
    Ok(Pose::new(rvec, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera_model::rodrigues;
    use rand::Rng as _;
    use rand::SeedableRng as _;
    use rand_chacha::ChaCha8Rng;

    fn grid_points(n_side: usize, spacing: f64) -> Vec<Vector2<f64>> {
        let mut pts = Vec::new();
        for i in 0..n_side {
            for j in 0..n_side {
                pts.push(Vector2::new(j as f64 * spacing, i as f64 * spacing));
            }
        }
        pts
    }

    /// Homography synthesized from a pose and intrinsics: H = K [r1 r2 t].
    fn homography_from_pose(k: &Intrinsics, pose: &Pose) -> Homography {
        let r = rodrigues(&pose.rvec);
        let m = Matrix3::from_columns(&[
            r.column(0).into_owned(),
            r.column(1).into_owned(),
            pose.t,
        ]);
        Homography::new(k.matrix() * m)
    }

    fn sample_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::new(
            Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ),
            Vector3::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(700.0..1400.0),
            ),
        )
    }

    #[test]
    fn identity_homography_from_four_points() {
        let board = vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(0.0, 1.0),
            Vector2::new(1.0, 1.0),
        ];
        let h = estimate_homography(&board, &board).unwrap();
        let m = h.matrix();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((m[(i, j)] - expected).abs() < 1e-10, "H = {m}");
            }
        }
    }

    #[test]
    fn recovers_known_homography_from_nine_points() {
        let h_true = Matrix3::new(1.2, 0.1, 30.0, -0.2, 0.9, 80.0, 1e-4, -2e-4, 1.0);
        let board = grid_points(3, 50.0);
        let image: Vec<_> = board
            .iter()
            .map(|p| Homography::new(h_true).apply(p))
            .collect();
        let h = estimate_homography(&board, &image).unwrap();
        for (b, px) in board.iter().zip(image.iter()) {
            assert!((h.apply(b) - px).norm() < 1e-8);
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let board: Vec<_> = (0..4).map(|i| Vector2::new(i as f64, 0.0)).collect();
        let image: Vec<_> = (0..4).map(|i| Vector2::new(i as f64 * 2.0, 1.0)).collect();
        assert!(matches!(
            estimate_homography(&board, &image),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn transfer_invariant_under_similarity_of_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Intrinsics::new(300.0, 280.0, 120.0, 110.0);
        let board = grid_points(4, 40.0);
        let pose = sample_pose(&mut rng);
        let h_gen = homography_from_pose(&k, &pose);
        let image: Vec<_> = board.iter().map(|p| h_gen.apply(p)).collect();
        // Similarity transform of the pixel coordinates.
        let angle: f64 = 0.3;
        let (s, c) = angle.sin_cos();
        let scale = 2.5;
        let offset = Vector2::new(310.0, -40.0);
        let image_sim: Vec<_> = image
            .iter()
            .map(|p| Vector2::new(scale * (c * p.x - s * p.y), scale * (s * p.x + c * p.y)) + offset)
            .collect();
        let h = estimate_homography(&board, &image_sim).unwrap();
        for (b, px) in board.iter().zip(image_sim.iter()) {
            assert!((h.apply(b) - px).norm() < 1e-9);
        }
    }

    #[test]
    fn zhang_bootstrap_recovers_intrinsics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k_true = Intrinsics::new(284.4, 284.4, 100.0, 100.0);
        for n_views in [3usize, 5] {
            let hs: Vec<_> = (0..n_views)
                .map(|_| homography_from_pose(&k_true, &sample_pose(&mut rng)))
                .collect();
            let k = intrinsics_from_homographies(&hs).unwrap();
            assert!((k.fx - k_true.fx).abs() / k_true.fx < 1e-6);
            assert!((k.fy - k_true.fy).abs() / k_true.fy < 1e-6);
            assert!((k.cx - k_true.cx).abs() / k_true.cx.abs() < 1e-6);
            assert!((k.cy - k_true.cy).abs() / k_true.cy.abs() < 1e-6);
        }
    }

    #[test]
    fn zhang_bootstrap_random_camera_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k_true = Intrinsics::new(512.3, 481.7, 301.2, 255.9);
        let hs: Vec<_> = (0..5)
            .map(|_| homography_from_pose(&k_true, &sample_pose(&mut rng)))
            .collect();
        let k = intrinsics_from_homographies(&hs).unwrap();
        assert!((k.fx - k_true.fx).abs() / k_true.fx < 1e-6);
        assert!((k.fy - k_true.fy).abs() / k_true.fy < 1e-6);
    }

    #[test]
    fn identical_poses_are_degenerate_for_bootstrap() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k_true = Intrinsics::new(284.4, 284.4, 100.0, 100.0);
        let h = homography_from_pose(&k_true, &sample_pose(&mut rng));
        assert!(matches!(
            intrinsics_from_homographies(&[h, h]),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn decompose_recovers_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = Intrinsics::new(284.4, 284.4, 100.0, 100.0);
        for _ in 0..50 {
            let pose = sample_pose(&mut rng);
            let h = homography_from_pose(&k, &pose);
            let got = decompose_homography(&h, &k).unwrap();
            assert!((got.rvec - pose.rvec).norm() < 1e-6, "rvec mismatch");
            assert!((got.t - pose.t).norm() / pose.t.norm() < 1e-6, "t mismatch");
        }
    }

    #[test]
    fn decompose_identity_rotation() {
        let k = Intrinsics::new(284.4, 284.4, 100.0, 100.0);
        let pose = Pose::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1000.0));
        let h = homography_from_pose(&k, &pose);
        let got = decompose_homography(&h, &k).unwrap();
        assert!((got.rvec).norm() < 1e-9);
        assert!((got.t - pose.t).norm() < 1e-6);
    }

    #[test]
    fn decompose_is_invariant_to_homography_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let k = Intrinsics::new(284.4, 284.4, 100.0, 100.0);
        let pose = sample_pose(&mut rng);
        let h = homography_from_pose(&k, &pose);
        let h_neg = Homography::new(-h.matrix());
        let a = decompose_homography(&h, &k).unwrap();
        let b = decompose_homography(&h_neg, &k).unwrap();
        assert!((a.rvec - b.rvec).norm() < 1e-9);
        assert!((a.t - b.t).norm() < 1e-9);
    }
}
