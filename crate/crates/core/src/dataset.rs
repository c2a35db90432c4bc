//! Calibration datasets and their on-disk form: a JSON manifest plus
//! sibling depth-map files (PFM or CSV) and an optional groundtruth sidecar.

use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::board::BoardGeometry;
use crate::camera_model::{Distortion, Intrinsics, Pose};
use crate::depth_denoise::{DepthMap, Plane};
use crate::error::{Error, Result};
use crate::pfm;
use crate::synthetic::GroundTruth;
use crate::traditional_calib::CalibParams;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Measurements of one checkerboard image: sub-pixel corner pixels
/// (row-major over the interior grid) plus, optionally, a measured depth per
/// corner and a full depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageObservations {
    pub corners_px: Vec<Vector2<f64>>,
    pub corner_depths: Option<Vec<f64>>,
    pub depth_map: Option<DepthMap>,
}

/// Board geometry plus per-image measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationDataset {
    pub board: BoardGeometry,
    pub image_width: usize,
    pub image_height: usize,
    pub images: Vec<ImageObservations>,
}

impl CalibrationDataset {
    /// Enforce the structural invariants: consistent corner counts, positive
    /// depths, depth maps matching the declared image size.
    pub fn validate(&self) -> Result<()> {
        let m = self.board.corner_count();
        if self.board.white_parity > 1 {
            return Err(Error::Parse("white_parity must be 0 or 1".into()));
        }
        for (j, img) in self.images.iter().enumerate() {
            if img.corners_px.len() != m {
                return Err(Error::Parse(format!(
                    "image {j}: {} corners, board declares {m}",
                    img.corners_px.len()
                )));
            }
            if let Some(depths) = &img.corner_depths {
                if depths.len() != m {
                    return Err(Error::Parse(format!(
                        "image {j}: {} corner depths, board declares {m}",
                        depths.len()
                    )));
                }
                if let Some(bad) = depths.iter().find(|d| !d.is_finite() || **d <= 0.0) {
                    return Err(Error::Parse(format!(
                        "image {j}: non-positive corner depth {bad}"
                    )));
                }
            }
            if let Some(map) = &img.depth_map {
                if map.width() != self.image_width || map.height() != self.image_height {
                    return Err(Error::Parse(format!(
                        "image {j}: depth map is {}x{}, camera declares {}x{}",
                        map.width(),
                        map.height(),
                        self.image_width,
                        self.image_height
                    )));
                }
            }
        }
        Ok(())
    }
}

// --- on-disk schema ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ManifestDto {
    schema_version: u32,
    board: BoardDto,
    camera: CameraDto,
    images: Vec<ImageDto>,
    #[serde(skip_serializing_if = "Option::is_none")]
    groundtruth: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct BoardDto {
    rows: usize,
    cols: usize,
    square_size_mm: f64,
    white_parity: u8,
}

#[derive(Serialize, Deserialize)]
struct CameraDto {
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct ImageDto {
    corners_px: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    corner_depths_mm: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    depth_map: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthDto {
    schema_version: u32,
    params: CalibParamsDto,
    corner_pixels: Vec<Vec<[f64; 2]>>,
    corner_depths_mm: Vec<Vec<f64>>,
    planes: Vec<PlaneDto>,
}

#[derive(Serialize, Deserialize)]
struct PlaneDto {
    normal: [f64; 3],
    rho_mm: f64,
}

/// Serialized calibration parameters; also the output schema of the
/// `calibrate` command. Units: pixels for intrinsics, millimetres for
/// translations, radians for the axis-angle rotation.
#[derive(Serialize, Deserialize)]
pub struct CalibParamsDto {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub kc: [f64; 4],
    pub poses: Vec<PoseDto>,
    #[serde(default = "default_units")]
    pub units: UnitsDto,
}

#[derive(Serialize, Deserialize)]
pub struct PoseDto {
    pub rvec: [f64; 3],
    pub t: [f64; 3],
}

#[derive(Serialize, Deserialize, Clone)]
pub struct UnitsDto {
    pub image: String,
    pub depth: String,
}

fn default_units() -> UnitsDto {
    UnitsDto {
        image: "pixel".into(),
        depth: "mm".into(),
    }
}

impl From<&CalibParams> for CalibParamsDto {
    fn from(p: &CalibParams) -> Self {
        Self {
            fx: p.intrinsics.fx,
            fy: p.intrinsics.fy,
            cx: p.intrinsics.cx,
            cy: p.intrinsics.cy,
            kc: [
                p.distortion.k1,
                p.distortion.k2,
                p.distortion.k3,
                p.distortion.k4,
            ],
            poses: p
                .poses
                .iter()
                .map(|pose| PoseDto {
                    rvec: [pose.rvec.x, pose.rvec.y, pose.rvec.z],
                    t: [pose.t.x, pose.t.y, pose.t.z],
                })
                .collect(),
            units: default_units(),
        }
    }
}

impl From<&CalibParamsDto> for CalibParams {
    fn from(d: &CalibParamsDto) -> Self {
        Self {
            intrinsics: Intrinsics::new(d.fx, d.fy, d.cx, d.cy),
            distortion: Distortion::new(d.kc[0], d.kc[1], d.kc[2], d.kc[3]),
            poses: d
                .poses
                .iter()
                .map(|p| {
                    Pose::new(
                        Vector3::new(p.rvec[0], p.rvec[1], p.rvec[2]),
                        Vector3::new(p.t[0], p.t[1], p.t[2]),
                    )
                })
                .collect(),
        }
    }
}

/// Depth-map file format for [`save_dataset`], chosen by extension on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthMapFormat {
    Pfm,
    Csv,
}

impl DepthMapFormat {
    fn extension(self) -> &'static str {
        match self {
            DepthMapFormat::Pfm => "pfm",
            DepthMapFormat::Csv => "csv",
        }
    }
}

/// Write a dataset (and optional groundtruth sidecar) into `dir`:
/// `manifest.json`, one depth file per image that has a map, and
/// `groundtruth.json`.
pub fn save_dataset(
    dataset: &CalibrationDataset,
    groundtruth: Option<&GroundTruth>,
    dir: &Path,
    format: DepthMapFormat,
) -> Result<()> {
    dataset.validate()?;
    std::fs::create_dir_all(dir)?;

    let mut image_dtos = Vec::with_capacity(dataset.images.len());
    for (j, img) in dataset.images.iter().enumerate() {
        let depth_map = match &img.depth_map {
            Some(map) => {
                let name = format!("depth_{j:03}.{}", format.extension());
                let path = dir.join(&name);
                match format {
                    DepthMapFormat::Pfm => pfm::write_pfm(map, &path)?,
                    DepthMapFormat::Csv => pfm::write_csv_grid(map, &path)?,
                }
                Some(name)
            }
            None => None,
        };
        image_dtos.push(ImageDto {
            corners_px: img.corners_px.iter().map(|c| [c.x, c.y]).collect(),
            corner_depths_mm: img.corner_depths.clone(),
            depth_map,
        });
    }

    let gt_name = groundtruth.map(|_| "groundtruth.json".to_string());
    if let Some(gt) = groundtruth {
        let dto = GroundTruthDto {
            schema_version: MANIFEST_SCHEMA_VERSION,
            params: (&gt.params).into(),
            corner_pixels: gt
                .corner_pixels
                .iter()
                .map(|img| img.iter().map(|c| [c.x, c.y]).collect())
                .collect(),
            corner_depths_mm: gt.corner_depths.clone(),
            planes: gt
                .planes
                .iter()
                .map(|p| PlaneDto {
                    normal: [p.normal.x, p.normal.y, p.normal.z],
                    rho_mm: p.rho,
                })
                .collect(),
        };
        let f = std::fs::File::create(dir.join(gt_name.as_deref().unwrap()))?;
        serde_json::to_writer_pretty(f, &dto).map_err(|e| Error::Parse(e.to_string()))?;
    }

    let manifest = ManifestDto {
        schema_version: MANIFEST_SCHEMA_VERSION,
        board: BoardDto {
            rows: dataset.board.rows,
            cols: dataset.board.cols,
            square_size_mm: dataset.board.square_size,
            white_parity: dataset.board.white_parity,
        },
        camera: CameraDto {
            width: dataset.image_width,
            height: dataset.image_height,
        },
        images: image_dtos,
        groundtruth: gt_name,
    };
    let f = std::fs::File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(f, &manifest).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

/// Load a dataset from a manifest path or from a directory containing
/// `manifest.json`. Returns the groundtruth too when the sidecar is present.
pub fn load_dataset(path: &Path) -> Result<(CalibrationDataset, Option<GroundTruth>)> {
    let manifest_path: PathBuf = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let text = std::fs::read_to_string(&manifest_path)?;
    let manifest: ManifestDto = serde_json::from_str(&text).map_err(|e| {
        Error::Parse(format!("{}: {}", manifest_path.display(), e))
    })?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::SchemaVersionMismatch {
            found: manifest.schema_version,
            expected: MANIFEST_SCHEMA_VERSION,
        });
    }

    let board = BoardGeometry::new(
        manifest.board.rows,
        manifest.board.cols,
        manifest.board.square_size_mm,
        manifest.board.white_parity,
    );
    let mut images = Vec::with_capacity(manifest.images.len());
    for dto in &manifest.images {
        let depth_map = match &dto.depth_map {
            Some(rel) => {
                let p = dir.join(rel);
                let map = match p.extension().and_then(|e| e.to_str()) {
                    Some("pfm") => pfm::read_pfm(&p)?,
                    Some("csv") => pfm::read_csv_grid(&p)?,
                    other => {
                        return Err(Error::Parse(format!(
                            "{}: unsupported depth map extension {:?}",
                            p.display(),
                            other
                        )))
                    }
                };
                Some(map)
            }
            None => None,
        };
        images.push(ImageObservations {
            corners_px: dto
                .corners_px
                .iter()
                .map(|c| Vector2::new(c[0], c[1]))
                .collect(),
            corner_depths: dto.corner_depths_mm.clone(),
            depth_map,
        });
    }
    let dataset = CalibrationDataset {
        board,
        image_width: manifest.camera.width,
        image_height: manifest.camera.height,
        images,
    };
    dataset.validate()?;

    let groundtruth = match &manifest.groundtruth {
        Some(rel) => {
            let p = dir.join(rel);
            let text = std::fs::read_to_string(&p)?;
            let dto: GroundTruthDto = serde_json::from_str(&text)
                .map_err(|e| Error::Parse(format!("{}: {}", p.display(), e)))?;
            if dto.schema_version != MANIFEST_SCHEMA_VERSION {
                return Err(Error::SchemaVersionMismatch {
                    found: dto.schema_version,
                    expected: MANIFEST_SCHEMA_VERSION,
                });
            }
            Some(GroundTruth {
                params: (&dto.params).into(),
                corner_pixels: dto
                    .corner_pixels
                    .iter()
                    .map(|img| img.iter().map(|c| Vector2::new(c[0], c[1])).collect())
                    .collect(),
                corner_depths: dto.corner_depths_mm.clone(),
                planes: dto
                    .planes
                    .iter()
                    .map(|p| {
                        Plane::new(
                            Vector3::new(p.normal[0], p.normal[1], p.normal[2]),
                            p.rho_mm,
                        )
                    })
                    .collect(),
            })
        }
        None => None,
    };
    Ok((dataset, groundtruth))
}

/// Write calibration parameters as JSON.
pub fn save_params(params: &CalibParams, path: &Path) -> Result<()> {
    let dto: CalibParamsDto = params.into();
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(f, &dto).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

/// Read calibration parameters from JSON.
pub fn load_params(path: &Path) -> Result<CalibParams> {
    let text = std::fs::read_to_string(path)?;
    let dto: CalibParamsDto = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {}", path.display(), e)))?;
    Ok((&dto).into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{render_dataset, SynthConfig};

    fn tmpdir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("tofcal_dataset_tests").join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn small_config() -> SynthConfig {
        SynthConfig {
            n_images: 2,
            board_rows: 3,
            board_cols: 3,
            image_width: 64,
            image_height: 64,
            seed: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn round_trip_with_groundtruth_csv() {
        let (dataset, gt) = render_dataset(&small_config()).unwrap();
        let dir = tmpdir("roundtrip_csv");
        save_dataset(&dataset, Some(&gt), &dir, DepthMapFormat::Csv).unwrap();
        let (loaded, loaded_gt) = load_dataset(&dir).unwrap();
        // CSV keeps f64 precision, so equality is exact.
        assert_eq!(dataset, loaded);
        let lgt = loaded_gt.unwrap();
        assert_eq!(gt.params.intrinsics, lgt.params.intrinsics);
        assert_eq!(gt.params.poses, lgt.params.poses);
        assert_eq!(gt.corner_depths, lgt.corner_depths);
    }

    #[test]
    fn round_trip_pfm_is_stable_after_quantization() {
        let (dataset, _) = render_dataset(&small_config()).unwrap();
        let dir = tmpdir("roundtrip_pfm");
        save_dataset(&dataset, None, &dir, DepthMapFormat::Pfm).unwrap();
        let (loaded1, _) = load_dataset(&dir).unwrap();
        save_dataset(&loaded1, None, &dir, DepthMapFormat::Pfm).unwrap();
        let (loaded2, _) = load_dataset(&dir).unwrap();
        assert_eq!(loaded1, loaded2);
        // Corners and per-corner depths are stored in JSON at full precision.
        assert_eq!(dataset.images[0].corners_px, loaded1.images[0].corners_px);
        assert_eq!(
            dataset.images[0].corner_depths,
            loaded1.images[0].corner_depths
        );
    }

    #[test]
    fn missing_board_section_is_a_parse_error() {
        let dir = tmpdir("missing_board");
        std::fs::write(
            dir.join(MANIFEST_FILE),
            r#"{"schema_version": 1, "camera": {"width": 10, "height": 10}, "images": []}"#,
        )
        .unwrap();
        match load_dataset(&dir) {
            Err(Error::Parse(msg)) => assert!(msg.contains("board"), "message: {msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let dir = tmpdir("schema");
        std::fs::write(
            dir.join(MANIFEST_FILE),
            r#"{"schema_version": 99, "board": {"rows": 2, "cols": 2, "square_size_mm": 50.0, "white_parity": 0}, "camera": {"width": 10, "height": 10}, "images": []}"#,
        )
        .unwrap();
        assert!(matches!(
            load_dataset(&dir),
            Err(Error::SchemaVersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn dataset_without_groundtruth_loads() {
        let (dataset, _) = render_dataset(&small_config()).unwrap();
        let dir = tmpdir("no_gt");
        save_dataset(&dataset, None, &dir, DepthMapFormat::Csv).unwrap();
        let (_, gt) = load_dataset(&dir).unwrap();
        assert!(gt.is_none());
    }

    #[test]
    fn params_round_trip() {
        let (_, gt) = render_dataset(&small_config()).unwrap();
        let dir = tmpdir("params");
        let path = dir.join("params.json");
        save_params(&gt.params, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(gt.params.intrinsics, loaded.intrinsics);
        assert_eq!(gt.params.distortion, loaded.distortion);
        assert_eq!(gt.params.poses, loaded.poses);
    }
}
