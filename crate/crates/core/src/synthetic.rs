//! Groundtruth-known synthetic datasets: a checkerboard under randomized
//! valid poses, exact projections and depths, analytic planar depth maps and
//! calibrated Gaussian noise injection.

use nalgebra::{Vector2, Vector3};
use rand::Rng as _;
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::board::BoardGeometry;
use crate::camera_model::{
    depth_of, pixel_ray, project, rodrigues, Distortion, Intrinsics, Pose,
};
use crate::dataset::{CalibrationDataset, ImageObservations};
use crate::depth_denoise::{DepthMap, Plane};
use crate::error::{Error, Result};
use crate::traditional_calib::CalibParams;

const POSE_REJECTION_LIMIT: usize = 1000;

/// Controls for dataset generation. Defaults mirror a small-resolution TOF
/// camera observing an 11x11 interior-corner board of 50 mm squares.
#[derive(Debug, Clone, Serialize)]
pub struct SynthConfig {
    pub board_rows: usize,
    pub board_cols: usize,
    pub square_size: f64,
    pub white_parity: u8,
    #[serde(with = "intrinsics_serde")]
    pub intrinsics: Intrinsics,
    #[serde(with = "distortion_serde")]
    pub distortion: Distortion,
    pub image_width: usize,
    pub image_height: usize,
    pub n_images: usize,
    /// Sampled z-distance of the board centre, mm.
    pub distance_range: (f64, f64),
    /// Maximum board tilt away from frontal, radians.
    pub max_tilt: f64,
    /// Corner pixel noise, standard deviation in pixels.
    pub noise_px: f64,
    /// Depth noise, standard deviation in mm.
    pub noise_depth: f64,
    pub seed: u64,
}

mod intrinsics_serde {
    use super::Intrinsics;
    use serde::ser::SerializeStruct;

    pub fn serialize<S: serde::Serializer>(k: &Intrinsics, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("Intrinsics", 4)?;
        st.serialize_field("fx", &k.fx)?;
        st.serialize_field("fy", &k.fy)?;
        st.serialize_field("cx", &k.cx)?;
        st.serialize_field("cy", &k.cy)?;
        st.end()
    }
}

mod distortion_serde {
    use super::Distortion;

    pub fn serialize<S: serde::Serializer>(kc: &Distortion, s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&[kc.k1, kc.k2, kc.k3, kc.k4], s)
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            board_rows: 11,
            board_cols: 11,
            square_size: 50.0,
            white_parity: 0,
            intrinsics: Intrinsics::new(284.4, 284.4, 100.0, 100.0),
            distortion: Distortion::new(0.1, -0.05, 0.001, 0.002),
            image_width: 200,
            image_height: 200,
            n_images: 7,
            distance_range: (600.0, 1500.0),
            max_tilt: 40f64.to_radians(),
            noise_px: 0.01,
            noise_depth: 10.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn board(&self) -> BoardGeometry {
        BoardGeometry::new(
            self.board_rows,
            self.board_cols,
            self.square_size,
            self.white_parity,
        )
    }
}

/// Everything the generator knows: the generating parameters, exact corner
/// pixels and depths, and the exact board plane of each image, all
/// noise-free.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub params: CalibParams,
    pub corner_pixels: Vec<Vec<Vector2<f64>>>,
    pub corner_depths: Vec<Vec<f64>>,
    pub planes: Vec<Plane>,
}

/// Interior-corner board on the z = 0 world plane.
pub fn generate_board(rows: usize, cols: usize, square_size: f64) -> Result<BoardGeometry> {
    if rows < 2 || cols < 2 {
        return Err(Error::degenerate(
            "board needs at least 2x2 interior corners",
        ));
    }
    if !square_size.is_finite() || square_size <= 0.0 {
        return Err(Error::degenerate("square size must be positive"));
    }
    Ok(BoardGeometry::new(rows, cols, square_size, 0))
}

/// Rejection-sample a pose whose board centre projects inside the central
/// 60% of the image and whose corners are all comfortably in view.
pub fn sample_pose(rng: &mut ChaCha8Rng, config: &SynthConfig) -> Result<Pose> {
    let board = config.board();
    let corners = board.world_corners();
    let centre_w = Vector3::new(
        (board.cols - 1) as f64 * board.square_size / 2.0,
        (board.rows - 1) as f64 * board.square_size / 2.0,
        0.0,
    );
    let (w, h) = (config.image_width as f64, config.image_height as f64);
    let k = &config.intrinsics;
    let margin = 2.0;

    for _ in 0..POSE_REJECTION_LIMIT {
        let distance = rng.random_range(config.distance_range.0..=config.distance_range.1);
        let tilt = rng.random_range(0.0..=config.max_tilt);
        let tilt_dir = rng.random_range(0.0..std::f64::consts::TAU);
        let inplane = rng.random_range(0.0..std::f64::consts::TAU);
        let tilt_axis = Vector3::new(tilt_dir.cos(), tilt_dir.sin(), 0.0);
        let r = rodrigues(&(tilt_axis * tilt)) * rodrigues(&Vector3::new(0.0, 0.0, inplane));

        // Aim the board centre at a pixel inside the central 60% box.
        let u = rng.random_range(0.2 * w..0.8 * w);
        let v = rng.random_range(0.2 * h..0.8 * h);
        let n_target = Vector2::new((u - k.cx) / k.fx, (v - k.cy) / k.fy);
        let centre_c = Vector3::new(
            n_target.x * distance,
            n_target.y * distance,
            distance,
        );
        let rvec = match crate::camera_model::rodrigues_inv(&r) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let pose = Pose::new(rvec, centre_c - r * centre_w);

        let all_visible = corners.iter().all(|x_w| {
            match project(x_w, &pose, k, &config.distortion) {
                Ok(px) => {
                    px.x >= margin && px.x <= w - 1.0 - margin && px.y >= margin
                        && px.y <= h - 1.0 - margin
                }
                Err(_) => false,
            }
        });
        if !all_visible {
            continue;
        }
        // The centre constraint is checked after distortion too.
        let centre_px = match project(&centre_w, &pose, k, &config.distortion) {
            Ok(px) => px,
            Err(_) => continue,
        };
        if centre_px.x < 0.2 * w || centre_px.x > 0.8 * w || centre_px.y < 0.2 * h
            || centre_px.y > 0.8 * h
        {
            continue;
        }
        return Ok(pose);
    }
    Err(Error::RejectionExhausted(POSE_REJECTION_LIMIT))
}

/// Exact board plane of a pose in the camera frame: the world z = 0 plane
/// mapped through the rigid transform.
pub fn board_plane(pose: &Pose) -> Plane {
    let r = rodrigues(&pose.rvec);
    let normal: Vector3<f64> = r.column(2).into();
    Plane::new(normal, normal.dot(&pose.t))
}

/// Depth along the ray through `px` to the board plane, or NaN when the ray
/// misses the physical board (one square beyond the interior grid on every
/// side) or the plane. `rotation` must be the materialized pose rotation.
fn board_depth_at_pixel(
    px: &Vector2<f64>,
    pose: &Pose,
    rotation: &nalgebra::Matrix3<f64>,
    plane: &Plane,
    board: &BoardGeometry,
    k: &Intrinsics,
    kc: &Distortion,
) -> f64 {
    let Ok(ray) = pixel_ray(px, k, kc) else {
        return f64::NAN;
    };
    let denom = plane.normal.dot(&ray);
    if denom.abs() <= 1e-12 {
        return f64::NAN;
    }
    let s = plane.rho / denom;
    if s <= 0.0 {
        return f64::NAN;
    }
    let point_c = ray * s;
    let w = rotation.transpose() * (point_c - pose.t);
    let sq = board.square_size;
    let (x_min, x_max) = (-sq, board.cols as f64 * sq);
    let (y_min, y_max) = (-sq, board.rows as f64 * sq);
    if w.x >= x_min && w.x <= x_max && w.y >= y_min && w.y <= y_max {
        s
    } else {
        f64::NAN
    }
}

/// Generate a noise-free dataset together with its groundtruth. Corner
/// pixels come from the exact projection, corner depths from the exact
/// camera-to-corner distance, and each depth-map pixel from the analytic
/// ray/board-plane intersection.
pub fn render_dataset(config: &SynthConfig) -> Result<(CalibrationDataset, GroundTruth)> {
    let board = generate_board(config.board_rows, config.board_cols, config.square_size)
        .map(|mut b| {
            b.white_parity = config.white_parity;
            b
        })?;
    let corners_w = board.world_corners();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut images = Vec::with_capacity(config.n_images);
    let mut poses = Vec::with_capacity(config.n_images);
    let mut gt_pixels = Vec::with_capacity(config.n_images);
    let mut gt_depths = Vec::with_capacity(config.n_images);
    let mut gt_planes = Vec::with_capacity(config.n_images);

    for _ in 0..config.n_images {
        let pose = sample_pose(&mut rng, config)?;
        let pixels: Vec<Vector2<f64>> = corners_w
            .iter()
            .map(|x_w| project(x_w, &pose, &config.intrinsics, &config.distortion))
            .collect::<Result<_>>()?;
        let depths: Vec<f64> = corners_w.iter().map(|x_w| depth_of(x_w, &pose)).collect();
        let plane = board_plane(&pose);
        let rotation = rodrigues(&pose.rvec);

        let mut map = DepthMap::new(config.image_width, config.image_height);
        for y in 0..config.image_height {
            for x in 0..config.image_width {
                let d = board_depth_at_pixel(
                    &Vector2::new(x as f64, y as f64),
                    &pose,
                    &rotation,
                    &plane,
                    &board,
                    &config.intrinsics,
                    &config.distortion,
                );
                map.set(x, y, d);
            }
        }

        images.push(ImageObservations {
            corners_px: pixels.clone(),
            corner_depths: Some(depths.clone()),
            depth_map: Some(map),
        });
        poses.push(pose);
        gt_pixels.push(pixels);
        gt_depths.push(depths);
        gt_planes.push(plane);
    }

    let dataset = CalibrationDataset {
        board,
        image_width: config.image_width,
        image_height: config.image_height,
        images,
    };
    let groundtruth = GroundTruth {
        params: CalibParams {
            intrinsics: config.intrinsics,
            distortion: config.distortion,
            poses,
        },
        corner_pixels: gt_pixels,
        corner_depths: gt_depths,
        planes: gt_planes,
    };
    Ok((dataset, groundtruth))
}

/// Add i.i.d. Gaussian noise to every measurement: corner pixel coordinates
/// (`sigma_px`), per-corner depths and depth-map pixels (`sigma_depth`).
/// Groundtruth is never touched. Deterministic per seed.
pub fn add_noise(
    dataset: &CalibrationDataset,
    sigma_px: f64,
    sigma_depth: f64,
    seed: u64,
) -> CalibrationDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px_noise = Normal::new(0.0, sigma_px).expect("sigma_px must be non-negative");
    let d_noise = Normal::new(0.0, sigma_depth).expect("sigma_depth must be non-negative");
    let mut out = dataset.clone();
    for image in &mut out.images {
        for c in &mut image.corners_px {
            c.x += px_noise.sample(&mut rng);
            c.y += px_noise.sample(&mut rng);
        }
        if let Some(depths) = &mut image.corner_depths {
            for d in depths.iter_mut() {
                *d += d_noise.sample(&mut rng);
            }
        }
        if let Some(map) = &mut image.depth_map {
            for v in map.data_mut() {
                // Invalid pixels stay invalid; the draw still happens so the
                // stream is independent of the validity pattern.
                let n = d_noise.sample(&mut rng);
                if v.is_finite() {
                    *v += n;
                }
            }
        }
    }
    out
}

/// Restrict a dataset to its first `n_images` images and the top-left
/// `k x k` corner sub-grid. The sub-grid preserves world coordinates and the
/// neighbor structure; depth maps are kept whole.
pub fn subset(
    dataset: &CalibrationDataset,
    n_images: usize,
    corner_grid_k: usize,
) -> Result<CalibrationDataset> {
    if n_images > dataset.images.len() {
        return Err(Error::SubsetTooLarge(format!(
            "{} images requested, {} available",
            n_images,
            dataset.images.len()
        )));
    }
    if corner_grid_k < 2
        || corner_grid_k > dataset.board.rows
        || corner_grid_k > dataset.board.cols
    {
        return Err(Error::SubsetTooLarge(format!(
            "corner grid {}x{} requested from a {}x{} board",
            corner_grid_k, corner_grid_k, dataset.board.rows, dataset.board.cols
        )));
    }
    let k = corner_grid_k;
    let cols = dataset.board.cols;
    let keep: Vec<usize> = (0..k)
        .flat_map(|i| (0..k).map(move |j| i * cols + j))
        .collect();
    let board = BoardGeometry::new(
        k,
        k,
        dataset.board.square_size,
        dataset.board.white_parity,
    );
    let images = dataset.images[..n_images]
        .iter()
        .map(|img| ImageObservations {
            corners_px: keep.iter().map(|&i| img.corners_px[i]).collect(),
            corner_depths: img
                .corner_depths
                .as_ref()
                .map(|d| keep.iter().map(|&i| d[i]).collect()),
            depth_map: img.depth_map.clone(),
        })
        .collect();
    Ok(CalibrationDataset {
        board,
        image_width: dataset.image_width,
        image_height: dataset.image_height,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera_model::world_to_camera;

    #[test]
    fn sample_pose_is_deterministic() {
        let config = SynthConfig::default();
        let a = sample_pose(&mut ChaCha8Rng::seed_from_u64(42), &config).unwrap();
        let b = sample_pose(&mut ChaCha8Rng::seed_from_u64(42), &config).unwrap();
        assert_eq!(a.rvec, b.rvec);
        assert_eq!(a.t, b.t);
    }

    #[test]
    fn sampled_poses_keep_all_corners_visible() {
        let config = SynthConfig::default();
        let board = config.board();
        let corners = board.world_corners();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let pose = sample_pose(&mut rng, &config).unwrap();
            for x_w in &corners {
                let px = project(x_w, &pose, &config.intrinsics, &config.distortion).unwrap();
                assert!(px.x >= 0.0 && px.x <= 199.0 && px.y >= 0.0 && px.y <= 199.0);
            }
        }
    }

    #[test]
    fn zero_tilt_gives_frontal_board() {
        let config = SynthConfig {
            max_tilt: 0.0,
            ..SynthConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = sample_pose(&mut rng, &config).unwrap();
        let r = rodrigues(&pose.rvec);
        // Rotation about z only: board normal stays along the optical axis.
        let n: Vector3<f64> = r.column(2).into();
        assert!((n - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn render_is_bit_deterministic() {
        let config = SynthConfig {
            n_images: 2,
            board_rows: 4,
            board_cols: 4,
            image_width: 60,
            image_height: 60,
            ..SynthConfig::default()
        };
        let (a, _) = render_dataset(&config).unwrap();
        let (b, _) = render_dataset(&config).unwrap();
        assert_eq!(a.images[0].corners_px, b.images[0].corners_px);
        assert_eq!(
            a.images[1].depth_map.as_ref().unwrap(),
            b.images[1].depth_map.as_ref().unwrap()
        );
    }

    #[test]
    fn depth_map_consistent_with_corner_depths() {
        let config = SynthConfig {
            n_images: 1,
            ..SynthConfig::default()
        };
        let (_, gt) = render_dataset(&config).unwrap();
        let board = config.board();
        let pose = gt.params.poses[0];
        let plane = gt.planes[0];
        for (x_w, (&px_depth, px)) in board
            .world_corners()
            .iter()
            .zip(gt.corner_depths[0].iter().zip(gt.corner_pixels[0].iter()))
        {
            let along_ray = board_depth_at_pixel(
                px,
                &pose,
                &rodrigues(&pose.rvec),
                &plane,
                &board,
                &config.intrinsics,
                &config.distortion,
            );
            assert!((along_ray - px_depth).abs() < 1e-9);
            let _ = x_w;
        }
    }

    #[test]
    fn exact_plane_contains_transformed_corners() {
        let config = SynthConfig {
            n_images: 3,
            ..SynthConfig::default()
        };
        let (_, gt) = render_dataset(&config).unwrap();
        let board = config.board();
        for (pose, plane) in gt.params.poses.iter().zip(gt.planes.iter()) {
            for x_w in board.world_corners() {
                let x_c = world_to_camera(&x_w, pose);
                assert!(plane.signed_distance(&x_c).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn groundtruth_regenerates_measurements_bit_exactly() {
        let config = SynthConfig {
            n_images: 2,
            board_rows: 4,
            board_cols: 4,
            image_width: 80,
            image_height: 80,
            seed: 6,
            ..SynthConfig::default()
        };
        let (dataset, gt) = render_dataset(&config).unwrap();
        let board = config.board();
        for (j, image) in dataset.images.iter().enumerate() {
            assert_eq!(image.corners_px, gt.corner_pixels[j]);
            for (i, x_w) in board.world_corners().iter().enumerate() {
                let px = project(
                    x_w,
                    &gt.params.poses[j],
                    &gt.params.intrinsics,
                    &gt.params.distortion,
                )
                .unwrap();
                assert_eq!(px, image.corners_px[i]);
                assert_eq!(
                    depth_of(x_w, &gt.params.poses[j]),
                    image.corner_depths.as_ref().unwrap()[i]
                );
            }
        }
    }

    #[test]
    fn zero_noise_leaves_dataset_unchanged() {
        let config = SynthConfig {
            n_images: 2,
            board_rows: 4,
            board_cols: 4,
            image_width: 50,
            image_height: 50,
            ..SynthConfig::default()
        };
        let (dataset, _) = render_dataset(&config).unwrap();
        let noisy = add_noise(&dataset, 0.0, 0.0, 5);
        assert_eq!(dataset.images[0].corners_px, noisy.images[0].corners_px);
        assert_eq!(
            dataset.images[1].corner_depths,
            noisy.images[1].corner_depths
        );
    }

    #[test]
    fn noise_variance_matches_request() {
        let config = SynthConfig {
            n_images: 7,
            ..SynthConfig::default()
        };
        let (dataset, _) = render_dataset(&config).unwrap();
        let sigma = 0.5;
        // Pool draws until the sample holds over 1e5 values.
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        let mut seed = 0;
        while count < 100_000 {
            let noisy = add_noise(&dataset, sigma, 0.0, seed);
            for (a, b) in dataset.images.iter().zip(noisy.images.iter()) {
                for (ca, cb) in a.corners_px.iter().zip(b.corners_px.iter()) {
                    let d = cb - ca;
                    sum_sq += d.x * d.x + d.y * d.y;
                    count += 2;
                }
            }
            seed += 1;
        }
        let var = sum_sq / count as f64;
        assert!(
            (var - sigma * sigma).abs() / (sigma * sigma) < 0.02,
            "sample variance {var} over {count} values vs requested {}",
            sigma * sigma
        );
    }

    #[test]
    fn different_seeds_differ() {
        let config = SynthConfig {
            n_images: 1,
            board_rows: 3,
            board_cols: 3,
            image_width: 50,
            image_height: 50,
            ..SynthConfig::default()
        };
        let (dataset, _) = render_dataset(&config).unwrap();
        let a = add_noise(&dataset, 0.01, 10.0, 1);
        let b = add_noise(&dataset, 0.01, 10.0, 2);
        assert_ne!(a.images[0].corners_px, b.images[0].corners_px);
    }

    #[test]
    fn generate_board_validates_counts() {
        assert!(generate_board(1, 5, 50.0).is_err());
        assert!(generate_board(5, 1, 50.0).is_err());
        assert!(generate_board(5, 5, 0.0).is_err());
        let b = generate_board(2, 2, 50.0).unwrap();
        assert_eq!(b.corner_count(), 4);
        // Default counts give the 121-corner interior grid.
        assert_eq!(SynthConfig::default().board().corner_count(), 121);
    }

    #[test]
    fn subset_grid_sizes() {
        let (dataset, _) = render_dataset(&SynthConfig::default()).unwrap();
        let s = subset(&dataset, 3, 2).unwrap();
        assert_eq!(s.images.len(), 3);
        assert_eq!(s.board.corner_count(), 4);
        let s6 = subset(&dataset, 7, 6).unwrap();
        assert_eq!(s6.board.corner_count(), 36);
        // Top-left block preserves world coordinates.
        assert_eq!(
            s6.images[0].corners_px[0],
            dataset.images[0].corners_px[0]
        );
        assert_eq!(
            s6.images[0].corners_px[6],
            dataset.images[0].corners_px[11]
        );
        assert!(matches!(
            subset(&dataset, 8, 2),
            Err(Error::SubsetTooLarge(_))
        ));
        assert!(matches!(
            subset(&dataset, 3, 12),
            Err(Error::SubsetTooLarge(_))
        ));
    }
}
