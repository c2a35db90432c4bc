//! Scoring calibrations against groundtruth and the benchmark grid that
//! compares the traditional and depth-based pipelines over image-count and
//! corner-count subsets.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::camera_model::{back_project, rodrigues, Intrinsics};
use crate::dataset::CalibrationDataset;
use crate::depth_calib::{depth_based_calib, DepthCalibOptions};
use crate::error::{Error, Result};
use crate::synthetic::{add_noise, render_dataset, subset, GroundTruth, SynthConfig};
use crate::traditional_calib::{calibrate_traditional, CalibParams};

/// Mean 3D distance between groundtruth corners and corners reconstructed
/// from the measured pixels, the groundtruth depths and the estimated
/// calibration: each corner is back-projected with its exact depth and
/// mapped into the world frame through the estimated pose. Evaluates the
/// first `params.poses.len()` images over the full corner grid.
pub fn mean_3d_error(
    params: &CalibParams,
    dataset: &CalibrationDataset,
    groundtruth: &GroundTruth,
) -> Result<f64> {
    let corners_w = dataset.board.world_corners();
    let m = corners_w.len();
    let n = params.poses.len();
    if n > dataset.images.len() || n > groundtruth.corner_depths.len() {
        return Err(Error::MissingGroundtruth(format!(
            "{n} poses but only {} measured / {} groundtruth images",
            dataset.images.len(),
            groundtruth.corner_depths.len()
        )));
    }
    let mut total = 0.0;
    for (j, pose) in params.poses.iter().enumerate() {
        let depths = &groundtruth.corner_depths[j];
        if depths.len() != m {
            return Err(Error::MissingGroundtruth(format!(
                "image {j}: {} groundtruth depths for {m} corners",
                depths.len()
            )));
        }
        let rot = rodrigues(&pose.rvec);
        for (i, x_w) in corners_w.iter().enumerate() {
            let x_m = &dataset.images[j].corners_px[i];
            let x_c = back_project(x_m, depths[i], &params.intrinsics, &params.distortion)?;
            let x_w_hat = rot.transpose() * (x_c - pose.t);
            total += (x_w_hat - x_w).norm();
        }
    }
    Ok(total / (m * n) as f64)
}

/// Relative focal-length error `|f_est - f_true|_1 / |f_true|_1`.
pub fn relative_focal_error(estimated: &Intrinsics, groundtruth: &Intrinsics) -> f64 {
    ((estimated.fx - groundtruth.fx).abs() + (estimated.fy - groundtruth.fy).abs())
        / (groundtruth.fx + groundtruth.fy)
}

/// Benchmark controls: the base synthetic camera, the grid of image counts
/// and corner sub-grids, and the seed list.
#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkConfig {
    pub synth: SynthConfig,
    pub image_counts: Vec<usize>,
    /// Corner sub-grid side lengths; `k` gives `k*k` corners.
    pub corner_grids: Vec<usize>,
    pub seeds: Vec<u64>,
    pub depth_options: DepthCalibOptions,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            image_counts: vec![3, 4, 5, 6, 7],
            corner_grids: vec![2, 3, 4, 5, 6],
            seeds: (0..20).collect(),
            depth_options: DepthCalibOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Summary {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub ok: bool,
    /// Depth pipeline only: the intrinsics-update loop did not meet its
    /// convergence rule (reported, not a failure).
    pub diverged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_3d_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel_focal_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodStats {
    pub ok: usize,
    pub failed: usize,
    pub diverged: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_3d_mm: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel_focal_error: Option<Summary>,
    pub per_seed: Vec<SeedOutcome>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub images: usize,
    pub corners: usize,
    pub traditional: MethodStats,
    pub depth: MethodStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    /// FNV-1a hash of the serialized configuration, for provenance.
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub image_counts: Vec<usize>,
    pub corner_counts: Vec<usize>,
    pub cells: Vec<CellReport>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Linear-interpolation quantile of a non-empty sample.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    }
}

fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    Some(Summary {
        median: quantile(values, 0.5),
        q25: quantile(values, 0.25),
        q75: quantile(values, 0.75),
        mean: values.iter().sum::<f64>() / values.len() as f64,
    })
}

fn aggregate(per_seed: Vec<SeedOutcome>) -> MethodStats {
    let ok = per_seed.iter().filter(|o| o.ok).count();
    let failed = per_seed.len() - ok;
    let diverged = per_seed.iter().filter(|o| o.diverged).count();
    let e3: Vec<f64> = per_seed.iter().filter_map(|o| o.error_3d_mm).collect();
    let fe: Vec<f64> = per_seed.iter().filter_map(|o| o.rel_focal_error).collect();
    MethodStats {
        ok,
        failed,
        diverged,
        error_3d_mm: summarize(&e3),
        rel_focal_error: summarize(&fe),
        per_seed,
    }
}

fn failed_outcome(seed: u64, message: String) -> SeedOutcome {
    SeedOutcome {
        seed,
        ok: false,
        diverged: false,
        error_3d_mm: None,
        rel_focal_error: None,
        message: Some(message),
    }
}

const NOISE_SEED_SALT: u64 = 0x517c_c1b7_2722_0a95;

/// Run both pipelines over the whole grid. One full-board dataset is drawn
/// per seed and every cell calibrates on its own subset of it; evaluation
/// always uses the full corner grid. Per-cell failures are recorded in the
/// report, never propagated. Results are independent of thread scheduling.
pub fn run_benchmark(config: &BenchmarkConfig) -> BenchmarkReport {
    let config_hash = format!(
        "{:016x}",
        fnv1a64(
            serde_json::to_string(config)
                .expect("benchmark config serializes")
                .as_bytes()
        )
    );

    // One noisy dataset per seed, shared by all cells.
    let per_seed: Vec<std::result::Result<(CalibrationDataset, GroundTruth), String>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let synth = SynthConfig {
                seed,
                ..config.synth.clone()
            };
            let (dataset, gt) = render_dataset(&synth).map_err(|e| e.to_string())?;
            let noisy = if synth.noise_px > 0.0 || synth.noise_depth > 0.0 {
                add_noise(
                    &dataset,
                    synth.noise_px,
                    synth.noise_depth,
                    seed.wrapping_add(NOISE_SEED_SALT),
                )
            } else {
                dataset
            };
            Ok((noisy, gt))
        })
        .collect();

    let cells: Vec<(usize, usize)> = config
        .image_counts
        .iter()
        .flat_map(|&n| config.corner_grids.iter().map(move |&k| (n, k)))
        .collect();

    let tasks: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..config.seeds.len()).map(move |s| (c, s)))
        .collect();

    let outcomes: Vec<(SeedOutcome, SeedOutcome)> = tasks
        .par_iter()
        .map(|&(cell_idx, seed_idx)| {
            let (n_images, k) = cells[cell_idx];
            let seed = config.seeds[seed_idx];
            let (full, gt) = match &per_seed[seed_idx] {
                Ok(pair) => pair,
                Err(msg) => {
                    return (
                        failed_outcome(seed, format!("dataset generation: {msg}")),
                        failed_outcome(seed, format!("dataset generation: {msg}")),
                    );
                }
            };
            let sub = match subset(full, n_images, k) {
                Ok(s) => s,
                Err(e) => {
                    return (
                        failed_outcome(seed, e.to_string()),
                        failed_outcome(seed, e.to_string()),
                    );
                }
            };
            let evaluate = |params: &CalibParams| -> std::result::Result<(f64, f64), String> {
                let e3 = mean_3d_error(params, full, gt).map_err(|e| e.to_string())?;
                let fe = relative_focal_error(&params.intrinsics, &gt.params.intrinsics);
                Ok((e3, fe))
            };
            let traditional = match calibrate_traditional(&sub, &config.depth_options.lm)
                .map_err(|e| e.to_string())
                .and_then(|(p, _)| evaluate(&p))
            {
                Ok((e3, fe)) => SeedOutcome {
                    seed,
                    ok: true,
                    diverged: false,
                    error_3d_mm: Some(e3),
                    rel_focal_error: Some(fe),
                    message: None,
                },
                Err(msg) => failed_outcome(seed, msg),
            };
            let depth = match depth_based_calib(&sub, &config.depth_options)
                .map_err(|e| e.to_string())
                .and_then(|(p, diag)| evaluate(&p).map(|m| (m, diag)))
            {
                Ok(((e3, fe), diag)) => SeedOutcome {
                    seed,
                    ok: true,
                    diverged: !diag.k_update_converged,
                    error_3d_mm: Some(e3),
                    rel_focal_error: Some(fe),
                    message: None,
                },
                Err(msg) => failed_outcome(seed, msg),
            };
            (traditional, depth)
        })
        .collect();

    let n_seeds = config.seeds.len();
    let cell_reports: Vec<CellReport> = cells
        .iter()
        .enumerate()
        .map(|(cell_idx, &(n_images, k))| {
            let mut trad = Vec::with_capacity(n_seeds);
            let mut depth = Vec::with_capacity(n_seeds);
            for s in 0..n_seeds {
                let (t, d) = outcomes[cell_idx * n_seeds + s].clone();
                trad.push(t);
                depth.push(d);
            }
            CellReport {
                images: n_images,
                corners: k * k,
                traditional: aggregate(trad),
                depth: aggregate(depth),
            }
        })
        .collect();

    BenchmarkReport {
        schema_version: 1,
        config_hash,
        seeds: config.seeds.clone(),
        image_counts: config.image_counts.clone(),
        corner_counts: config.corner_grids.iter().map(|k| k * k).collect(),
        cells: cell_reports,
    }
}

fn fmt_cell(summary: &Option<Summary>) -> String {
    match summary {
        Some(s) => format!("{:.4}", s.median),
        None => "fail".to_string(),
    }
}

/// Write the report files into `dir`:
///
/// * `report.json` — the full report;
/// * `table_3d_error.csv` / `.txt` — median mean-3D-error per cell, corner
///   counts down the rows, image counts across the columns, one row per
///   method;
/// * `focal_error.csv` — per-cell relative-focal-error summaries, one row
///   per `(corners, images, method)`, ready for plotting.
///
/// Output bytes are a deterministic function of the report.
pub fn export_report(report: &BenchmarkReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(&json_path, json)?;
    written.push(json_path);

    let cell = |corners: usize, images: usize| -> Option<&CellReport> {
        report
            .cells
            .iter()
            .find(|c| c.corners == corners && c.images == images)
    };

    let mut corner_counts = report.corner_counts.clone();
    corner_counts.sort_unstable();
    let mut image_counts = report.image_counts.clone();
    image_counts.sort_unstable();

    // Table: 3D error medians, mm.
    let csv_path = dir.join("table_3d_error.csv");
    let mut csv = String::from("corners,method");
    for n in &image_counts {
        csv.push_str(&format!(",{n} images"));
    }
    csv.push('\n');
    for &m in &corner_counts {
        for method in ["traditional", "depth"] {
            csv.push_str(&format!("{m},{method}"));
            for &n in &image_counts {
                let value = cell(m, n)
                    .map(|c| {
                        let stats = if method == "traditional" {
                            &c.traditional
                        } else {
                            &c.depth
                        };
                        fmt_cell(&stats.error_3d_mm)
                    })
                    .unwrap_or_else(|| "-".into());
                csv.push_str(&format!(",{value}"));
            }
            csv.push('\n');
        }
    }
    std::fs::write(&csv_path, &csv)?;
    written.push(csv_path);

    let txt_path = dir.join("table_3d_error.txt");
    let mut txt = String::new();
    txt.push_str(&format!("{:>8} {:>12}", "corners", "method"));
    for n in &image_counts {
        txt.push_str(&format!(" {:>10}", format!("{n} img")));
    }
    txt.push('\n');
    for &m in &corner_counts {
        for method in ["traditional", "depth"] {
            txt.push_str(&format!("{m:>8} {method:>12}"));
            for &n in &image_counts {
                let value = cell(m, n)
                    .map(|c| {
                        let stats = if method == "traditional" {
                            &c.traditional
                        } else {
                            &c.depth
                        };
                        fmt_cell(&stats.error_3d_mm)
                    })
                    .unwrap_or_else(|| "-".into());
                txt.push_str(&format!(" {value:>10}"));
            }
            txt.push('\n');
        }
    }
    std::fs::write(&txt_path, &txt)?;
    written.push(txt_path);

    // Relative focal error series.
    let focal_path = dir.join("focal_error.csv");
    let mut focal = String::from("corners,images,method,median,q25,q75,ok,failed,diverged\n");
    for &m in &corner_counts {
        for &n in &image_counts {
            if let Some(c) = cell(m, n) {
                for (method, stats) in [("traditional", &c.traditional), ("depth", &c.depth)] {
                    match &stats.rel_focal_error {
                        Some(s) => focal.push_str(&format!(
                            "{m},{n},{method},{:.6e},{:.6e},{:.6e},{},{},{}\n",
                            s.median, s.q25, s.q75, stats.ok, stats.failed, stats.diverged
                        )),
                        None => focal.push_str(&format!(
                            "{m},{n},{method},,,,{},{},{}\n",
                            stats.ok, stats.failed, stats.diverged
                        )),
                    }
                }
            }
        }
    }
    std::fs::write(&focal_path, &focal)?;
    written.push(focal_path);

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera_model::Pose;
    use nalgebra::Vector3;

    fn tiny_benchmark_config() -> BenchmarkConfig {
        BenchmarkConfig {
            synth: SynthConfig {
                board_rows: 6,
                board_cols: 6,
                image_width: 120,
                image_height: 120,
                n_images: 3,
                ..SynthConfig::default()
            },
            image_counts: vec![3],
            corner_grids: vec![3],
            seeds: vec![0, 1],
            depth_options: DepthCalibOptions::default(),
        }
    }

    #[test]
    fn mean_3d_error_zero_at_groundtruth() {
        let config = SynthConfig {
            n_images: 2,
            board_rows: 4,
            board_cols: 4,
            seed: 11,
            ..SynthConfig::default()
        };
        let (dataset, gt) = render_dataset(&config).unwrap();
        let e = mean_3d_error(&gt.params, &dataset, &gt).unwrap();
        assert!(e < 1e-9, "error {e}");
    }

    #[test]
    fn mean_3d_error_senses_translation_offset() {
        let config = SynthConfig {
            n_images: 1,
            board_rows: 5,
            board_cols: 5,
            max_tilt: 0.0,
            seed: 13,
            ..SynthConfig::default()
        };
        let (dataset, gt) = render_dataset(&config).unwrap();
        let mut params = gt.params.clone();
        params.poses[0].t.z += 1.0;
        let e = mean_3d_error(&params, &dataset, &gt).unwrap();
        assert!((e - 1.0).abs() < 1e-6, "error {e}");
    }

    #[test]
    fn mean_3d_error_requires_groundtruth_depths() {
        let config = SynthConfig {
            n_images: 2,
            board_rows: 3,
            board_cols: 3,
            seed: 17,
            ..SynthConfig::default()
        };
        let (dataset, gt) = render_dataset(&config).unwrap();
        let mut too_many = gt.params.clone();
        too_many
            .poses
            .push(Pose::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1000.0)));
        assert!(matches!(
            mean_3d_error(&too_many, &dataset, &gt),
            Err(Error::MissingGroundtruth(_))
        ));
    }

    #[test]
    fn relative_focal_error_values() {
        let f = Intrinsics::new(284.4, 284.4, 100.0, 100.0);
        assert_eq!(relative_focal_error(&f, &f), 0.0);
        let f11 = Intrinsics::new(284.4 * 1.1, 284.4 * 1.1, 100.0, 100.0);
        assert!((relative_focal_error(&f11, &f) - 0.1).abs() < 1e-12);
        let mixed = Intrinsics::new(290.0, 281.0, 100.0, 100.0);
        assert!((relative_focal_error(&mixed, &f) - 9.0 / 568.8).abs() < 1e-12);
    }

    #[test]
    fn benchmark_is_deterministic() {
        let config = tiny_benchmark_config();
        let a = run_benchmark(&config);
        let b = run_benchmark(&config);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn benchmark_aggregation_ignores_seed_order() {
        let mut config = tiny_benchmark_config();
        let a = run_benchmark(&config);
        config.seeds = vec![1, 0];
        let b = run_benchmark(&config);
        let sa = a.cells[0].traditional.error_3d_mm.clone().unwrap();
        let sb = b.cells[0].traditional.error_3d_mm.clone().unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn noiseless_benchmark_cell_is_exact_for_both_methods() {
        let mut config = tiny_benchmark_config();
        config.synth.noise_px = 0.0;
        config.synth.noise_depth = 0.0;
        config.seeds = vec![0];
        let report = run_benchmark(&config);
        let cell = &report.cells[0];
        assert_eq!(cell.traditional.ok, 1, "{:?}", cell.traditional.per_seed);
        assert_eq!(cell.depth.ok, 1, "{:?}", cell.depth.per_seed);
        assert!(cell.traditional.error_3d_mm.as_ref().unwrap().median < 1e-3);
        assert!(cell.depth.error_3d_mm.as_ref().unwrap().median < 1e-3);
    }

    #[test]
    fn export_writes_deterministic_files() {
        let mut config = tiny_benchmark_config();
        config.seeds = vec![0];
        let report = run_benchmark(&config);
        let dir1 = std::env::temp_dir().join("tofcal_export_a");
        let dir2 = std::env::temp_dir().join("tofcal_export_b");
        let _ = std::fs::remove_dir_all(&dir1);
        let _ = std::fs::remove_dir_all(&dir2);
        let files1 = export_report(&report, &dir1).unwrap();
        let files2 = export_report(&report, &dir2).unwrap();
        assert_eq!(files1.len(), 4);
        for (a, b) in files1.iter().zip(files2.iter()) {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
        let table = std::fs::read_to_string(dir1.join("table_3d_error.csv")).unwrap();
        assert!(table.starts_with("corners,method,3 images"));
        // Header plus one row per method for the single corner count.
        assert_eq!(table.lines().count(), 3);
    }

    #[test]
    fn export_handles_empty_report() {
        let report = BenchmarkReport {
            schema_version: 1,
            config_hash: "0".repeat(16),
            seeds: vec![],
            image_counts: vec![],
            corner_counts: vec![],
            cells: vec![],
        };
        let dir = std::env::temp_dir().join("tofcal_export_empty");
        let _ = std::fs::remove_dir_all(&dir);
        export_report(&report, &dir).unwrap();
        let table = std::fs::read_to_string(dir.join("table_3d_error.csv")).unwrap();
        assert_eq!(table.lines().count(), 1);
        let focal = std::fs::read_to_string(dir.join("focal_error.csv")).unwrap();
        assert_eq!(focal.lines().count(), 1);
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }
}
