//! Command-line driver: synthetic dataset generation, calibration with
//! either pipeline, standalone depth denoising, the benchmark grid, and a
//! Jacobian self-check.
//!
//! Exit codes: 0 success, 2 parse/configuration error, 3 numerical failure,
//! 4 non-convergence (diagnostics are still written).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use tofcal::dataset::{load_dataset, load_params, save_dataset, save_params, DepthMapFormat};
use tofcal::depth_calib::{
    depth_based_calib, depth_jacobian, depth_residuals, planarize_dataset, DepthCalibOptions,
    VarianceWeights,
};
use tofcal::error::Error;
use tofcal::eval::{export_report, run_benchmark, BenchmarkConfig};
use tofcal::solvers::check_jacobian;
use tofcal::synthetic::{add_noise, render_dataset, SynthConfig};
use tofcal::traditional_calib::{
    calibrate_traditional, reprojection_jacobian, reprojection_residuals, CalibParams,
};

#[derive(Parser)]
#[command(name = "tofcal", version, about = "Depth-camera calibration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Traditional,
    Depth,
}

#[derive(Clone, Copy, ValueEnum)]
enum DepthFormat {
    Pfm,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with groundtruth sidecar.
    Synth {
        /// Output directory for manifest, depth maps and groundtruth.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of checkerboard images.
        #[arg(long, default_value_t = 7)]
        images: usize,
        /// Interior corner rows.
        #[arg(long, default_value_t = 11)]
        rows: usize,
        /// Interior corner columns.
        #[arg(long, default_value_t = 11)]
        cols: usize,
        /// Checker square edge, mm.
        #[arg(long, default_value_t = 50.0)]
        square_mm: f64,
        /// Corner pixel noise sigma, px.
        #[arg(long, default_value_t = 0.0)]
        noise_px: f64,
        /// Depth noise sigma, mm.
        #[arg(long, default_value_t = 0.0)]
        noise_depth: f64,
        #[arg(long, value_enum, default_value_t = DepthFormat::Pfm)]
        depth_format: DepthFormat,
        /// Skip writing per-pixel depth maps (keeps per-corner depths).
        #[arg(long)]
        no_depth_maps: bool,
    },
    /// Calibrate a dataset and write the parameters as JSON.
    Calibrate {
        /// Dataset directory or manifest path.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Output parameter file (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Diagnostics file for the depth method (default: `<out>` with a
        /// `.diagnostics.json` suffix).
        #[arg(long)]
        diagnostics: Option<PathBuf>,
        /// RANSAC seed for the plane fits.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Planarize the depth of each image and write per-corner depths.
    Denoise {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Calibration parameters to use (JSON). When absent, a traditional
        /// calibration is run first to bootstrap them.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the benchmark grid and export the report files.
    Benchmark {
        #[arg(long)]
        out: PathBuf,
        /// Number of seeds (datasets) per cell.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// First seed value.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image counts, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = vec![3, 4, 5, 6, 7])]
        images: Vec<usize>,
        /// Corner counts per image, comma separated (perfect squares).
        #[arg(long, value_delimiter = ',', default_values_t = vec![4, 9, 16, 25, 36])]
        corners: Vec<usize>,
        #[arg(long, default_value_t = 0.01)]
        noise_px: f64,
        #[arg(long, default_value_t = 10.0)]
        noise_depth: f64,
    },
    /// Verify the analytic Jacobians against finite differences.
    CheckJacobian {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Parse(_) | Error::SchemaVersionMismatch { .. } | Error::Io(_)
        | Error::SubsetTooLarge(_) => 2,
        Error::NoConvergence => 4,
        Error::Stage { source, .. } => exit_code_for(source),
        _ => 3,
    }
}

#[derive(Serialize)]
struct DenoiseImageOutput {
    denoised_depths_mm: Vec<f64>,
    fallback: Vec<bool>,
    whole_image_fallback: bool,
}

#[derive(Serialize)]
struct DenoiseOutput {
    schema_version: u32,
    images: Vec<DenoiseImageOutput>,
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            images,
            rows,
            cols,
            square_mm,
            noise_px,
            noise_depth,
            depth_format,
            no_depth_maps,
        } => {
            let config = SynthConfig {
                board_rows: rows,
                board_cols: cols,
                square_size: square_mm,
                n_images: images,
                seed,
                noise_px,
                noise_depth,
                ..SynthConfig::default()
            };
            let (dataset, gt) = render_dataset(&config)?;
            let mut dataset = if noise_px > 0.0 || noise_depth > 0.0 {
                add_noise(&dataset, noise_px, noise_depth, seed)
            } else {
                dataset
            };
            if no_depth_maps {
                for img in &mut dataset.images {
                    img.depth_map = None;
                }
            }
            let format = match depth_format {
                DepthFormat::Pfm => DepthMapFormat::Pfm,
                DepthFormat::Csv => DepthMapFormat::Csv,
            };
            save_dataset(&dataset, Some(&gt), &out, format)?;
            println!(
                "wrote {} images ({}x{} corners) to {}",
                dataset.images.len(),
                rows,
                cols,
                out.display()
            );
            Ok(0)
        }
        Command::Calibrate {
            dataset,
            method,
            out,
            diagnostics,
            seed,
        } => {
            let (data, _) = load_dataset(&dataset)?;
            match method {
                Method::Traditional => {
                    let (params, report) = calibrate_traditional(&data, &Default::default())?;
                    save_params(&params, &out)?;
                    println!(
                        "traditional calibration: cost {:.6e} after {} iterations -> {}",
                        report.final_cost,
                        report.iterations,
                        out.display()
                    );
                    Ok(0)
                }
                Method::Depth => {
                    let opts = DepthCalibOptions {
                        ransac: tofcal::depth_denoise::RansacOptions {
                            seed,
                            ..Default::default()
                        },
                        ..Default::default()
                    };
                    let (params, diag) = depth_based_calib(&data, &opts)?;
                    save_params(&params, &out)?;
                    let diag_path = diagnostics
                        .unwrap_or_else(|| out.with_extension("diagnostics.json"));
                    std::fs::write(
                        &diag_path,
                        serde_json::to_string_pretty(&diag)
                            .map_err(|e| Error::Parse(e.to_string()))?,
                    )?;
                    println!(
                        "depth calibration: {} -> {} (diagnostics: {})",
                        if diag.k_update_converged {
                            "converged"
                        } else {
                            "intrinsics loop did NOT converge"
                        },
                        out.display(),
                        diag_path.display()
                    );
                    Ok(if diag.k_update_converged { 0 } else { 4 })
                }
            }
        }
        Command::Denoise {
            dataset,
            out,
            calib,
            seed,
        } => {
            let (data, _) = load_dataset(&dataset)?;
            let params: CalibParams = match calib {
                Some(path) => load_params(&path)?,
                None => calibrate_traditional(&data, &Default::default())?.0,
            };
            let ransac = tofcal::depth_denoise::RansacOptions {
                seed,
                ..Default::default()
            };
            let planarized =
                planarize_dataset(&data, &params.intrinsics, &params.distortion, &ransac)?;
            let output = DenoiseOutput {
                schema_version: 1,
                images: planarized
                    .depths
                    .iter()
                    .zip(planarized.fallback.iter())
                    .enumerate()
                    .map(|(j, (depths, flags))| DenoiseImageOutput {
                        denoised_depths_mm: depths.clone(),
                        fallback: flags.clone(),
                        whole_image_fallback: planarized.fallback_images.contains(&j),
                    })
                    .collect(),
            };
            std::fs::write(
                &out,
                serde_json::to_string_pretty(&output).map_err(|e| Error::Parse(e.to_string()))?,
            )?;
            println!(
                "denoised {} images ({} whole-image fallbacks) -> {}",
                planarized.depths.len(),
                planarized.fallback_images.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Benchmark {
            out,
            seeds,
            seed,
            images,
            corners,
            noise_px,
            noise_depth,
        } => {
            let mut corner_grids = Vec::new();
            for c in &corners {
                let k = (*c as f64).sqrt().round() as usize;
                if k * k != *c || k < 2 {
                    return Err(Error::Parse(format!(
                        "corner count {c} is not a square of k >= 2"
                    )));
                }
                corner_grids.push(k);
            }
            let config = BenchmarkConfig {
                synth: SynthConfig {
                    noise_px,
                    noise_depth,
                    ..SynthConfig::default()
                },
                image_counts: images,
                corner_grids,
                seeds: (seed..seed + seeds as u64).collect(),
                depth_options: DepthCalibOptions::default(),
            };
            let report = run_benchmark(&config);
            let files = export_report(&report, &out)?;
            for f in &files {
                println!("wrote {}", f.display());
            }
            Ok(0)
        }
        Command::CheckJacobian { seed } => {
            let config = SynthConfig {
                n_images: 3,
                board_rows: 5,
                board_cols: 5,
                seed,
                ..SynthConfig::default()
            };
            let (data, gt) = render_dataset(&config)?;
            let n_images = 3;
            let mut x = gt.params.to_vector();
            for (i, v) in x.iter_mut().enumerate() {
                *v += ((i % 5) as f64 - 2.0) * 1e-3 * v.abs().max(1.0) * 0.05;
            }

            let reproj_res =
                |x: &DVector<f64>| reprojection_residuals(&CalibParams::from_vector(x, n_images), &data);
            let reproj_jac =
                |x: &DVector<f64>| reprojection_jacobian(&CalibParams::from_vector(x, n_images), &data);
            let d2d = check_jacobian(&reproj_res, &reproj_jac, &x, 1e-6);
            println!("2D reprojection Jacobian max relative discrepancy: {d2d:.3e}");

            let weights = VarianceWeights {
                sigma_px: vec![0.01; n_images],
                sigma_depth: vec![10.0; n_images],
            };
            let dhat = gt.corner_depths.clone();
            let joint_res = |x: &DVector<f64>| {
                depth_residuals(&CalibParams::from_vector(x, n_images), &data, &dhat, &weights)
            };
            let joint_jac = |x: &DVector<f64>| {
                depth_jacobian(&CalibParams::from_vector(x, n_images), &data, &weights)
            };
            let d3d = check_jacobian(&joint_res, &joint_jac, &x, 1e-6);
            println!("joint 2D+depth Jacobian max relative discrepancy: {d3d:.3e}");

            if d2d < 1e-5 && d3d < 1e-5 {
                println!("OK");
                Ok(0)
            } else {
                Err(Error::NumericalFailure(
                    "analytic Jacobians disagree with finite differences".into(),
                ))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code_for(&e))
        }
    }
}
