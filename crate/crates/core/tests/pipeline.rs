//! End-to-end behavior across modules: synthetic generation feeding both
//! calibration pipelines and the plane-based denoiser.

use nalgebra::Vector3;
use rand::Rng as _;
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;

use tofcal::camera_model::{back_project, Distortion, Intrinsics};
use tofcal::depth_calib::{depth_based_calib, planarize_dataset, DepthCalibOptions};
use tofcal::depth_denoise::{fit_plane_svd, ransac_plane, RansacOptions};
use tofcal::eval::mean_3d_error;
use tofcal::solvers::LmOptions;
use tofcal::synthetic::{add_noise, render_dataset, SynthConfig};
use tofcal::traditional_calib::calibrate_traditional;

#[test]
fn noiseless_end_to_end_recovery_default_board() {
    let config = SynthConfig {
        seed: 2024,
        ..SynthConfig::default()
    };
    let (dataset, gt) = render_dataset(&config).unwrap();
    let k_gt = gt.params.intrinsics;

    let (trad, _) = calibrate_traditional(&dataset, &LmOptions::default()).unwrap();
    let (depth, diag) = depth_based_calib(&dataset, &DepthCalibOptions::default()).unwrap();
    assert!(diag.k_update_converged);

    for params in [&trad, &depth] {
        assert!((params.intrinsics.fx - k_gt.fx).abs() / k_gt.fx < 1e-5);
        assert!((params.intrinsics.fy - k_gt.fy).abs() / k_gt.fy < 1e-5);
        assert!((params.intrinsics.cx - k_gt.cx).abs() / k_gt.cx < 1e-5);
        assert!((params.intrinsics.cy - k_gt.cy).abs() / k_gt.cy < 1e-5);
        assert!((params.distortion.k1 - gt.params.distortion.k1).abs() < 1e-5);
        let e = mean_3d_error(params, &dataset, &gt).unwrap();
        assert!(e < 1e-4, "3D error {e}");
    }
}

#[test]
fn planarization_exact_on_noiseless_synthetic_images() {
    // Exactness should hold for any camera within model range.
    let cameras = [
        (
            Intrinsics::new(284.4, 284.4, 100.0, 100.0),
            Distortion::new(0.1, -0.05, 0.001, 0.002),
        ),
        (
            Intrinsics::new(310.0, 297.0, 96.0, 104.0),
            Distortion::new(-0.2, 0.08, -0.003, 0.001),
        ),
    ];
    for (k, kc) in cameras {
        let config = SynthConfig {
            n_images: 2,
            intrinsics: k,
            distortion: kc,
            seed: 7,
            ..SynthConfig::default()
        };
        let (dataset, gt) = render_dataset(&config).unwrap();
        let planarized =
            planarize_dataset(&dataset, &k, &kc, &RansacOptions::default()).unwrap();
        assert!(planarized.fallback_images.is_empty());
        for (j, depths) in planarized.depths.iter().enumerate() {
            for (i, d) in depths.iter().enumerate() {
                let err = (d - gt.corner_depths[j][i]).abs();
                assert!(err < 1e-6, "image {j} corner {i}: depth error {err}");
            }
        }
    }
}

#[test]
fn denoised_corners_lie_on_a_single_plane() {
    let config = SynthConfig {
        n_images: 1,
        seed: 11,
        ..SynthConfig::default()
    };
    let (dataset, gt) = render_dataset(&config).unwrap();
    let k = gt.params.intrinsics;
    let kc = gt.params.distortion;
    let planarized = planarize_dataset(&dataset, &k, &kc, &RansacOptions::default()).unwrap();
    let points: Vec<Vector3<f64>> = dataset.images[0]
        .corners_px
        .iter()
        .zip(planarized.depths[0].iter())
        .map(|(px, &d)| back_project(px, d, &k, &kc).unwrap())
        .collect();
    let plane = fit_plane_svd(&points).unwrap();
    for p in &points {
        assert!(plane.signed_distance(p).abs() < 1e-9);
    }
}

#[test]
fn planarization_is_deterministic() {
    let config = SynthConfig {
        n_images: 3,
        seed: 13,
        ..SynthConfig::default()
    };
    let (dataset, gt) = render_dataset(&config).unwrap();
    let noisy = add_noise(&dataset, 0.01, 10.0, 5);
    let opts = RansacOptions::default();
    let a = planarize_dataset(&noisy, &gt.params.intrinsics, &gt.params.distortion, &opts)
        .unwrap();
    let b = planarize_dataset(&noisy, &gt.params.intrinsics, &gt.params.distortion, &opts)
        .unwrap();
    assert_eq!(a.depths, b.depths);
    assert_eq!(a.fallback_images, b.fallback_images);
}

#[test]
fn ransac_stays_close_to_clean_fit_under_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let normal = Vector3::new(0.2, -0.1, 0.97).normalize();
    let rho = 1100.0;
    let e1 = normal.cross(&Vector3::x()).normalize();
    let e2 = normal.cross(&e1);
    for trial in 0..10 {
        let clean: Vec<Vector3<f64>> = (0..300)
            .map(|_| {
                normal * rho
                    + e1 * rng.random_range(-250.0..250.0)
                    + e2 * rng.random_range(-250.0..250.0)
            })
            .collect();
        let mut contaminated = clean.clone();
        // 30% gross outliers.
        for i in 0..90 {
            contaminated[i * 3] = Vector3::new(
                rng.random_range(-400.0..400.0),
                rng.random_range(-400.0..400.0),
                rng.random_range(400.0..1600.0),
            );
        }
        let opts = RansacOptions {
            seed: trial,
            ..RansacOptions::default()
        };
        let clean_fit = fit_plane_svd(&clean).unwrap();
        let (robust_fit, _) = ransac_plane(&contaminated, &opts).unwrap();
        let angle = robust_fit
            .normal
            .cross(&clean_fit.normal)
            .norm()
            .asin()
            .to_degrees();
        assert!(angle < 1.0, "trial {trial}: normal deviated {angle} deg");
    }
}

#[test]
fn depth_pipeline_improves_on_traditional_under_noise() {
    // A smoke-scale version of the benchmark claim: median over a few seeds
    // at a small-data cell.
    let mut trad_errors = Vec::new();
    let mut depth_errors = Vec::new();
    for seed in 0..5 {
        let config = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        let (dataset, gt) = render_dataset(&config).unwrap();
        let noisy = add_noise(&dataset, 0.01, 10.0, seed + 1000);
        let sub = tofcal::synthetic::subset(&noisy, 5, 4).unwrap();
        if let Ok((p, _)) = calibrate_traditional(&sub, &LmOptions::default()) {
            if let Ok(e) = mean_3d_error(&p, &noisy, &gt) {
                trad_errors.push(e);
            }
        }
        if let Ok((p, _)) = depth_based_calib(&sub, &DepthCalibOptions::default()) {
            if let Ok(e) = mean_3d_error(&p, &noisy, &gt) {
                depth_errors.push(e);
            }
        }
    }
    assert!(trad_errors.len() >= 4 && depth_errors.len() >= 4);
    trad_errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    depth_errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let trad_median = trad_errors[trad_errors.len() / 2];
    let depth_median = depth_errors[depth_errors.len() / 2];
    assert!(
        depth_median < trad_median,
        "depth {depth_median} vs traditional {trad_median}"
    );
}
