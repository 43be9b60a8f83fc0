//! Batch orchestration: configuration, frame-triple depth computation,
//! per-plant measurement records, and file emission.
//!
//! Each interior frame of the sequence is a reference frame. Its previous
//! and next neighbors form two stereo pairs whose disparities are fused
//! into one depth map, and the frame's instance masks turn that depth into
//! per-plant records. Two-frame inputs degrade to a single forward pair.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::epipolar::{
    estimate_fundamental, rectify, sampson_distance, warp, EpipolarError, PointPair,
};
use crate::features::{detect_and_describe, match_descriptors, FeatureError};
use crate::io::{self, IoError};
use crate::phenometrics::{assign_leaves_multi, plant_record, PhenoParams, PlantRecord};
use crate::raster::{
    parse_segmentation, BitMask, FloatRaster, GrayRaster, Instance, MaskClass, RasterError,
};
use crate::stereo::{
    compute_disparity, fuse, CameraRig, DisparityProduct, PathCount, SgmParams, StereoError,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    BadLine { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: `{value}` is not {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("config: p1 ({p1}) must be below p2 ({p2})")]
    PenaltyOrder { p1: u16, p2: u16 },
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{frames} frames but {masks} mask files; they pair one-to-one")]
    InputCounts { frames: usize, masks: usize },
    #[error("need at least 2 frames, got {0}")]
    NotEnoughFrames(usize),
    #[error("frame {path}: {got_w}x{got_h} differs from first frame {want_w}x{want_h}")]
    FrameDims {
        path: PathBuf,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("cannot load {path}: {source}")]
    Load { path: PathBuf, source: IoError },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot encode {path}: {source}")]
    Encode { path: PathBuf, source: IoError },
    #[error("bad glob pattern `{pattern}`: {message}")]
    BadPattern { pattern: String, message: String },
    #[error("no output directory: pass --out or set out_dir in the config")]
    NoOutputDir,
}

/// Every tunable constant of the run. Flat `key = value` text file;
/// unknown keys are rejected so typos cannot silently revert a value
/// to its default.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Focal length in pixels. (0, 1e6)
    pub focal_px: f64,
    /// Principal point; image center when unset.
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    /// Camera height above ground, cm. (0, 1e4]
    pub height_cm: f64,
    /// Platform speed, cm/s. (0, 1e4]
    pub speed_cm_s: f64,
    /// Recording rate, frames/s. (0, 1e4]
    pub fps: f64,
    /// Frames skipped between the two views of a pair. [1, 1000]
    pub frame_stride: u32,
    /// Disparity search range, px. [1, 1024]
    pub d_max: usize,
    /// Small-jump smoothness penalty. [1, 65535], below p2.
    pub p1: u16,
    /// Large-jump smoothness penalty. [1, 65535]
    pub p2: u16,
    /// Aggregation directions, 4 or 8.
    pub paths: u8,
    /// Winner margin over off-neighborhood runner-up. [1, 10]
    pub uniqueness: f64,
    /// Disparities at or below this are treated as invalid. [0, 100]
    pub d_min_valid: f64,
    /// Blob detector response floor. (0, 1)
    pub det_threshold: f64,
    /// Nearest/second-nearest descriptor distance bound. (0, 1)
    pub match_ratio: f64,
    /// Sampson inlier gate, px. (0, 100]
    pub ransac_thresh_px: f64,
    /// Hypothesis budget. [1, 1e6]
    pub ransac_max_iters: usize,
    /// Seed for every stochastic stage.
    pub seed: u64,
    /// Slope of the leaf length to area regression. [0, 1000]
    pub leaf_area_coeff: f64,
    /// Minimum fraction of head pixels with valid depth. [0, 1]
    pub min_depth_fraction: f64,
    /// Depth percentile taken as the head top. [0, 1]
    pub top_percentile: f64,
    /// Head-top fallback below the camera height, cm. [0, 1e4]
    pub canopy_offset_cm: f64,
    /// Occlusion compensation on total leaf area. (0, 10]
    pub leaf_area_correction: f64,
    pub out_dir: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            focal_px: 1000.0,
            cx: None,
            cy: None,
            height_cm: 90.0,
            speed_cm_s: 100.0,
            fps: 60.0,
            frame_stride: 1,
            d_max: 128,
            p1: 10,
            p2: 120,
            paths: 8,
            uniqueness: 1.05,
            d_min_valid: 0.5,
            det_threshold: 3e-4,
            match_ratio: 0.7,
            ransac_thresh_px: 1.0,
            ransac_max_iters: 2000,
            seed: 7,
            leaf_area_coeff: 8.3,
            min_depth_fraction: 0.2,
            top_percentile: 0.05,
            canopy_offset_cm: 10.0,
            leaf_area_correction: 1.0,
            out_dir: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(
    key: &str,
    value: &str,
    expected: &'static str,
    ok: impl Fn(&T) -> bool,
) -> Result<T, ConfigError> {
    match value.parse::<T>() {
        Ok(v) if ok(&v) => Ok(v),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected,
        }),
    }
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_str(&text)
    }

    /// Parse `key = value` lines; `#` starts a comment, blanks ignored.
    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: idx + 1,
                text: raw.trim().to_string(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one key from its text form, range-checked.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "focal_px" => {
                self.focal_px =
                    parse_num(key, value, "a number in (0, 1e6)", |v: &f64| {
                        *v > 0.0 && *v < 1e6
                    })?
            }
            "cx" => self.cx = Some(parse_num(key, value, "a finite number", |v: &f64| v.is_finite())?),
            "cy" => self.cy = Some(parse_num(key, value, "a finite number", |v: &f64| v.is_finite())?),
            "height_cm" => {
                self.height_cm =
                    parse_num(key, value, "a number in (0, 1e4]", |v: &f64| {
                        *v > 0.0 && *v <= 1e4
                    })?
            }
            "speed_cm_s" => {
                self.speed_cm_s =
                    parse_num(key, value, "a number in (0, 1e4]", |v: &f64| {
                        *v > 0.0 && *v <= 1e4
                    })?
            }
            "fps" => {
                self.fps = parse_num(key, value, "a number in (0, 1e4]", |v: &f64| {
                    *v > 0.0 && *v <= 1e4
                })?
            }
            "frame_stride" => {
                self.frame_stride =
                    parse_num(key, value, "an integer in [1, 1000]", |v: &u32| {
                        (1..=1000).contains(v)
                    })?
            }
            "d_max" => {
                self.d_max = parse_num(key, value, "an integer in [1, 1024]", |v: &usize| {
                    (1..=1024).contains(v)
                })?
            }
            "p1" => self.p1 = parse_num(key, value, "an integer in [1, 65535]", |v: &u16| *v >= 1)?,
            "p2" => self.p2 = parse_num(key, value, "an integer in [1, 65535]", |v: &u16| *v >= 1)?,
            "paths" => self.paths = parse_num(key, value, "4 or 8", |v: &u8| *v == 4 || *v == 8)?,
            "uniqueness" => {
                self.uniqueness =
                    parse_num(key, value, "a number in [1, 10]", |v: &f64| {
                        (1.0..=10.0).contains(v)
                    })?
            }
            "d_min_valid" => {
                self.d_min_valid =
                    parse_num(key, value, "a number in [0, 100]", |v: &f64| {
                        (0.0..=100.0).contains(v)
                    })?
            }
            "det_threshold" => {
                self.det_threshold =
                    parse_num(key, value, "a number in (0, 1)", |v: &f64| {
                        *v > 0.0 && *v < 1.0
                    })?
            }
            "match_ratio" => {
                self.match_ratio =
                    parse_num(key, value, "a number in (0, 1)", |v: &f64| {
                        *v > 0.0 && *v < 1.0
                    })?
            }
            "ransac_thresh_px" => {
                self.ransac_thresh_px =
                    parse_num(key, value, "a number in (0, 100]", |v: &f64| {
                        *v > 0.0 && *v <= 100.0
                    })?
            }
            "ransac_max_iters" => {
                self.ransac_max_iters =
                    parse_num(key, value, "an integer in [1, 1000000]", |v: &usize| {
                        (1..=1_000_000).contains(v)
                    })?
            }
            "seed" => self.seed = parse_num(key, value, "an unsigned integer", |_: &u64| true)?,
            "leaf_area_coeff" => {
                self.leaf_area_coeff =
                    parse_num(key, value, "a number in [0, 1000]", |v: &f64| {
                        (0.0..=1000.0).contains(v)
                    })?
            }
            "min_depth_fraction" => {
                self.min_depth_fraction =
                    parse_num(key, value, "a number in [0, 1]", |v: &f64| {
                        (0.0..=1.0).contains(v)
                    })?
            }
            "top_percentile" => {
                self.top_percentile =
                    parse_num(key, value, "a number in [0, 1]", |v: &f64| {
                        (0.0..=1.0).contains(v)
                    })?
            }
            "canopy_offset_cm" => {
                self.canopy_offset_cm =
                    parse_num(key, value, "a number in [0, 1e4]", |v: &f64| {
                        (0.0..=1e4).contains(v)
                    })?
            }
            "leaf_area_correction" => {
                self.leaf_area_correction =
                    parse_num(key, value, "a number in (0, 10]", |v: &f64| {
                        *v > 0.0 && *v <= 10.0
                    })?
            }
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.p1 >= self.p2 {
            return Err(ConfigError::PenaltyOrder {
                p1: self.p1,
                p2: self.p2,
            });
        }
        Ok(())
    }

    fn rig_for(&self, dims: (usize, usize)) -> CameraRig {
        let cx = self.cx.unwrap_or((dims.0 as f64 - 1.0) / 2.0);
        let cy = self.cy.unwrap_or((dims.1 as f64 - 1.0) / 2.0);
        let mut rig = CameraRig::new(self.focal_px, cx, cy);
        rig.height_cm = self.height_cm;
        rig.speed_cm_s = self.speed_cm_s;
        rig.fps = self.fps;
        rig.frame_stride = self.frame_stride;
        rig
    }

    fn sgm_params(&self) -> SgmParams {
        SgmParams {
            d_max: self.d_max,
            p1: self.p1,
            p2: self.p2,
            paths: if self.paths == 4 {
                PathCount::Four
            } else {
                PathCount::Eight
            },
            uniqueness: self.uniqueness,
            d_min_valid: self.d_min_valid,
        }
    }

    fn pheno_params(&self) -> PhenoParams {
        PhenoParams {
            leaf_area_coeff: self.leaf_area_coeff,
            min_depth_fraction: self.min_depth_fraction,
            top_percentile: self.top_percentile,
            canopy_offset_cm: self.canopy_offset_cm,
            leaf_area_correction: self.leaf_area_correction,
        }
    }
}

/// Expand a shell-style glob to a sorted path list.
pub fn expand_glob(pattern: &str) -> Result<Vec<PathBuf>, PipelineError> {
    let entries = glob::glob(pattern).map_err(|e| PipelineError::BadPattern {
        pattern: pattern.to_string(),
        message: e.to_string(),
    })?;
    let mut paths = Vec::new();
    for entry in entries {
        match entry {
            Ok(p) => paths.push(p),
            Err(e) => {
                return Err(PipelineError::BadPattern {
                    pattern: pattern.to_string(),
                    message: e.to_string(),
                })
            }
        }
    }
    paths.sort();
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum FrameOutcome {
    /// Records were produced; per-plant failures are counted, not fatal.
    Ok { plants: usize, plant_errors: usize },
    /// Nothing to measure; not a failure.
    Skipped { reason: String },
    Failed { error: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameStatus {
    pub frame_id: String,
    pub outcome: FrameOutcome,
}

/// One plant that could not be measured; pairs with the records so every
/// ingested plant instance shows up exactly once.
#[derive(Debug, Clone, Serialize)]
pub struct PlantFailure {
    pub frame_id: String,
    pub plant_id: u32,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct FramePlant {
    pub frame_id: String,
    #[serde(flatten)]
    pub record: PlantRecord,
}

/// Reference-frame rasters for visualization output.
#[derive(Debug, Clone)]
pub struct FrameVisuals {
    pub frame_id: String,
    pub disparity: FloatRaster,
    pub depth: FloatRaster,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub frames: Vec<FrameStatus>,
    pub plants: Vec<FramePlant>,
    pub plant_errors: Vec<PlantFailure>,
    pub warnings: Vec<String>,
    pub notes: Vec<String>,
    pub visuals: Vec<FrameVisuals>,
    /// Wall-clock per reference frame; never written to output files so
    /// reruns stay byte-identical.
    pub timings_ms: Vec<(String, f64)>,
}

impl RunReport {
    pub fn all_frames_succeeded(&self) -> bool {
        self.frames
            .iter()
            .all(|f| !matches!(f.outcome, FrameOutcome::Failed { .. }))
    }
}

fn frame_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

/// Per-frame stage errors; collected into statuses, never aborting the run.
#[derive(Debug, Error)]
enum StageError {
    #[error("segmentation {path}: {source}")]
    Segmentation {
        path: PathBuf,
        source: RasterError,
    },
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("features: {0}")]
    Features(#[from] FeatureError),
    #[error("{matches} matches, need at least 8")]
    TooFewMatches { matches: usize },
    #[error("epipolar: {0}")]
    Epipolar(#[from] EpipolarError),
    #[error("support disparity {max_grid:.1} px exceeds the search range {d_max}")]
    DisparityOutOfRange { max_grid: f64, d_max: usize },
    #[error("stereo: {0}")]
    Stereo(#[from] StereoError),
    #[error("no stereo pair produced a disparity: {0}")]
    NoDepth(String),
}

struct RefOutput {
    status: FrameStatus,
    plants: Vec<FramePlant>,
    plant_errors: Vec<PlantFailure>,
    warnings: Vec<String>,
    visuals: Option<FrameVisuals>,
    elapsed_ms: f64,
}

/// Stereo product of one (reference, neighbor) pair: feature matching,
/// fundamental matrix, rectification, dense matching, and conversion of
/// grid disparity back to source-frame disparity so depth stays metric.
fn pair_product(
    cfg: &Config,
    reference: &GrayRaster,
    neighbor: &GrayRaster,
    frame_id: &str,
    baseline_cm: f64,
    seed: u64,
) -> Result<DisparityProduct, StageError> {
    let (ka, da) = detect_and_describe(reference, cfg.det_threshold)?;
    let (kb, db) = detect_and_describe(neighbor, cfg.det_threshold)?;
    let matches = match_descriptors(&da, &db, cfg.match_ratio)?;
    if matches.len() < 8 {
        return Err(StageError::TooFewMatches {
            matches: matches.len(),
        });
    }
    let pairs: Vec<PointPair> = matches
        .iter()
        .map(|m| {
            (
                (ka[m.index_a].x, ka[m.index_a].y),
                (kb[m.index_b].x, kb[m.index_b].y),
            )
        })
        .collect();
    let (f, inlier_idx) =
        estimate_fundamental(&pairs, cfg.ransac_thresh_px, cfg.ransac_max_iters, seed)?;
    let inliers: Vec<PointPair> = inlier_idx.iter().map(|&i| pairs[i]).collect();
    // Rectification is supported by the cleanest consensus core; detector
    // noise near the RANSAC gate would otherwise leak into the row
    // alignment, whose tolerance is tighter than the gate.
    let mut support: Vec<PointPair> = inliers
        .iter()
        .filter(|p| sampson_distance(&f.0, p) <= RECTIFY_SUPPORT_SAMPSON_PX)
        .copied()
        .collect();
    if support.len() < 8 {
        support = inliers;
    }
    let rp = rectify(&f, &support, reference.dims())?;

    // The search range must cover the support's grid disparities; a
    // degenerate two-view estimate can land content outside it, and
    // dense matching would then fuse plausible-looking garbage.
    let max_grid = support
        .iter()
        .map(|p| rp.grid_disparity(p))
        .fold(f64::NEG_INFINITY, f64::max);
    if !max_grid.is_finite() || max_grid >= cfg.d_max as f64 {
        return Err(StageError::DisparityOutOfRange {
            max_grid,
            d_max: cfg.d_max,
        });
    }

    let wa = warp(reference, &rp.h1, rp.out_dims)?;
    let wb = warp(neighbor, &rp.h2, rp.out_dims)?;
    let grid = compute_disparity(&wa.image, &wb.image, &cfg.sgm_params())?;

    // The rectifying alignment shifts all disparities positive, so the
    // direction of camera travel drops out here; magnitude plus the
    // matching positive baseline is what depth conversion needs.
    let mut metric = grid.clone();
    for y in 0..grid.height() {
        for x in 0..grid.width() {
            let d = grid.get(x, y);
            let v = if d.is_nan() || !wa.valid.get(x, y) {
                f32::NAN
            } else {
                let m = rp.original_disparity(x as f64, y as f64, d as f64).abs();
                if m.is_finite() {
                    m as f32
                } else {
                    f32::NAN
                }
            };
            metric.set(x, y, v);
        }
    }

    let h_ref = rp
        .h1
        .try_inverse()
        .ok_or(StageError::Epipolar(EpipolarError::SingularHomography))?;
    Ok(DisparityProduct {
        disparity: metric,
        h_ref,
        baseline_cm,
        frame_id: frame_id.to_string(),
        ref_dims: reference.dims(),
    })
}

/// Sampson bound for the inliers that anchor rectification.
const RECTIFY_SUPPORT_SAMPSON_PX: f64 = 0.3;

fn mix_seed(base: u64, frame_index: usize, direction: u64) -> u64 {
    base ^ (frame_index as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(direction)
}

fn process_reference(
    cfg: &Config,
    lumas: &[GrayRaster],
    frame_paths: &[PathBuf],
    mask_paths: &[PathBuf],
    index: usize,
    single_pair: bool,
) -> RefOutput {
    let started = Instant::now();
    let frame_id = frame_stem(&frame_paths[index]);
    let mut warnings = Vec::new();
    let fail = |e: StageError, elapsed: f64, warnings: Vec<String>| RefOutput {
        status: FrameStatus {
            frame_id: frame_id.clone(),
            outcome: FrameOutcome::Failed {
                error: e.to_string(),
            },
        },
        plants: Vec::new(),
        plant_errors: Vec::new(),
        warnings,
        visuals: None,
        elapsed_ms: elapsed,
    };

    // Masks are cheap to reject; parse before any stereo work.
    let seg = match fs::read(&mask_paths[index])
        .map_err(|source| StageError::Read {
            path: mask_paths[index].clone(),
            source,
        })
        .and_then(|bytes| {
            parse_segmentation(&bytes, Some(lumas[index].dims())).map_err(|source| {
                StageError::Segmentation {
                    path: mask_paths[index].clone(),
                    source,
                }
            })
        }) {
        Ok(s) => s,
        Err(e) => return fail(e, started.elapsed().as_secs_f64() * 1e3, warnings),
    };
    if seg.instances.is_empty() {
        warnings.push(format!("frame {frame_id}: empty segmentation, skipped"));
        return RefOutput {
            status: FrameStatus {
                frame_id: frame_id.clone(),
                outcome: FrameOutcome::Skipped {
                    reason: "empty segmentation".to_string(),
                },
            },
            plants: Vec::new(),
            plant_errors: Vec::new(),
            warnings,
            visuals: None,
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        };
    }

    let rig = cfg.rig_for(lumas[index].dims());
    let baseline = rig.baseline_cm();

    // Forward pair first; it stays the fusion primary.
    let mut neighbors = vec![(index + 1, 0u64, "next")];
    if !single_pair {
        neighbors.push((index - 1, 1u64, "previous"));
    }
    let mut products = Vec::new();
    for (j, dir, label) in neighbors {
        match pair_product(
            cfg,
            &lumas[index],
            &lumas[j],
            &frame_id,
            baseline,
            mix_seed(cfg.seed, index, dir),
        ) {
            Ok(p) => products.push(p),
            Err(e) => warnings.push(format!("frame {frame_id}: {label} pair failed: {e}")),
        }
    }
    if products.len() == 1 && !single_pair {
        warnings.push(format!(
            "frame {frame_id}: fusion degraded to a single pair"
        ));
    }
    let depth = match products.as_slice() {
        [] => {
            return fail(
                StageError::NoDepth(
                    warnings
                        .last()
                        .cloned()
                        .unwrap_or_else(|| "both pairs failed".to_string()),
                ),
                started.elapsed().as_secs_f64() * 1e3,
                warnings,
            )
        }
        [only] => fuse(only, only, &rig, cfg.d_min_valid),
        [primary, secondary, ..] => fuse(primary, secondary, &rig, cfg.d_min_valid),
    };
    let depth = match depth {
        Ok(d) => d,
        Err(e) => return fail(e.into(), started.elapsed().as_secs_f64() * 1e3, warnings),
    };

    // Reference-frame disparity from fused depth; same invalid pixels.
    let disparity = depth.map(|z| {
        if z.is_nan() {
            f32::NAN
        } else {
            (rig.focal_px * baseline / z as f64) as f32
        }
    });

    let (plants, plant_errors) =
        measure_plants(&seg.instances, &frame_id, &depth, &rig, cfg, &mut warnings);

    RefOutput {
        status: FrameStatus {
            frame_id: frame_id.clone(),
            outcome: FrameOutcome::Ok {
                plants: plants.len(),
                plant_errors: plant_errors.len(),
            },
        },
        plants,
        plant_errors,
        warnings,
        visuals: Some(FrameVisuals {
            frame_id,
            disparity,
            depth,
        }),
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
    }
}

/// Pair heads to plants, assign leaves, and build one record per plant.
/// A head belongs to the plant holding more than half of it, best
/// fraction first, lower plant id on ties.
fn measure_plants(
    instances: &[Instance],
    frame_id: &str,
    depth: &FloatRaster,
    rig: &CameraRig,
    cfg: &Config,
    warnings: &mut Vec<String>,
) -> (Vec<FramePlant>, Vec<PlantFailure>) {
    let params = cfg.pheno_params();
    let mut plants: Vec<&Instance> = instances
        .iter()
        .filter(|i| i.class == MaskClass::Plant)
        .collect();
    plants.sort_by_key(|p| p.id);
    let heads: Vec<&Instance> = instances
        .iter()
        .filter(|i| i.class == MaskClass::Head)
        .collect();
    let leaves: Vec<&Instance> = instances
        .iter()
        .filter(|i| i.class == MaskClass::Leaf)
        .collect();

    let mut head_of_plant: BTreeMap<u32, (&Instance, usize)> = BTreeMap::new();
    for head in &heads {
        let area = head.mask.area();
        if area == 0 {
            warnings.push(format!(
                "frame {frame_id}: head {} has an empty mask, ignored",
                head.id
            ));
            continue;
        }
        let mut best: Option<(u32, usize)> = None;
        for plant in &plants {
            let inside = plant
                .mask
                .intersection_area(&head.mask)
                .expect("segmentation masks share frame dimensions");
            if 2 * inside > area {
                let better = match best {
                    None => true,
                    Some((_, b)) => inside > b,
                };
                if better {
                    best = Some((plant.id, inside));
                }
            }
        }
        match best {
            Some((plant_id, inside)) => match head_of_plant.get(&plant_id) {
                Some((held, held_inside)) if *held_inside >= inside => {
                    warnings.push(format!(
                        "frame {frame_id}: plant {plant_id} already has head {}, ignoring head {}",
                        held.id, head.id
                    ));
                }
                _ => {
                    if let Some((displaced, _)) = head_of_plant.insert(plant_id, (head, inside)) {
                        warnings.push(format!(
                            "frame {frame_id}: plant {plant_id} already has head {}, ignoring it \
                             for the larger head {}",
                            displaced.id, head.id
                        ));
                    }
                }
            },
            None => warnings.push(format!(
                "frame {frame_id}: head {} overlaps no plant by more than half, ignored",
                head.id
            )),
        }
    }

    let plant_masks: Vec<&BitMask> = plants.iter().map(|p| &p.mask).collect();
    let leaf_masks: Vec<BitMask> = leaves.iter().map(|l| l.mask.clone()).collect();
    let assignment = assign_leaves_multi(&plant_masks, &leaf_masks)
        .expect("segmentation masks share frame dimensions");
    for (li, owner) in assignment.iter().enumerate() {
        if owner.is_none() {
            if leaves[li].mask.area() == 0 {
                warnings.push(format!(
                    "frame {frame_id}: leaf {} has an empty mask, skipped",
                    leaves[li].id
                ));
            } else {
                warnings.push(format!(
                    "frame {frame_id}: leaf {} belongs to no plant, skipped",
                    leaves[li].id
                ));
            }
        }
    }

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (pi, plant) in plants.iter().enumerate() {
        let Some((head, _)) = head_of_plant.get(&plant.id) else {
            failures.push(PlantFailure {
                frame_id: frame_id.to_string(),
                plant_id: plant.id,
                error: "no head instance assigned".to_string(),
            });
            continue;
        };
        let own_leaves: Vec<(u32, &BitMask)> = assignment
            .iter()
            .enumerate()
            .filter(|(_, owner)| **owner == Some(pi))
            .map(|(li, _)| (leaves[li].id, &leaves[li].mask))
            .collect();
        match plant_record(
            plant.id,
            &plant.mask,
            &head.mask,
            &own_leaves,
            depth,
            rig,
            &params,
        ) {
            Ok(record) => {
                if record.depth_fallback {
                    warnings.push(format!(
                        "frame {frame_id}: plant {} head depth fell back to the rig height",
                        plant.id
                    ));
                }
                for id in &record.leaves_skipped {
                    warnings.push(format!(
                        "frame {frame_id}: plant {} leaf {id} dropped, no valid depth",
                        plant.id
                    ));
                }
                records.push(FramePlant {
                    frame_id: frame_id.to_string(),
                    record,
                });
            }
            Err(e) => failures.push(PlantFailure {
                frame_id: frame_id.to_string(),
                plant_id: plant.id,
                error: e.to_string(),
            }),
        }
    }
    (records, failures)
}

/// Process a frame sequence. Frames and masks pair by position; both
/// lists are expected in capture order. Interior frames are the
/// references; a two-frame input degrades to one forward pair.
pub fn run(
    cfg: &Config,
    frame_paths: &[PathBuf],
    mask_paths: &[PathBuf],
) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    if frame_paths.len() != mask_paths.len() {
        return Err(PipelineError::InputCounts {
            frames: frame_paths.len(),
            masks: mask_paths.len(),
        });
    }
    if frame_paths.len() < 2 {
        return Err(PipelineError::NotEnoughFrames(frame_paths.len()));
    }

    let mut lumas = Vec::with_capacity(frame_paths.len());
    for path in frame_paths {
        let color = io::load_color(path).map_err(|source| PipelineError::Load {
            path: path.clone(),
            source,
        })?;
        lumas.push(color.to_luma());
    }
    let dims = lumas[0].dims();
    for (path, luma) in frame_paths.iter().zip(&lumas).skip(1) {
        if luma.dims() != dims {
            return Err(PipelineError::FrameDims {
                path: path.clone(),
                got_w: luma.width(),
                got_h: luma.height(),
                want_w: dims.0,
                want_h: dims.1,
            });
        }
    }

    let single_pair = frame_paths.len() == 2;
    let refs: Vec<usize> = if single_pair {
        vec![0]
    } else {
        (1..frame_paths.len() - 1).collect()
    };

    let mut report = RunReport::default();
    if single_pair {
        report
            .notes
            .push("single-pair mode: two frames, forward pair only, no fusion".to_string());
    } else {
        report.notes.push(format!(
            "{} reference frames; first and last frames serve as neighbors only",
            refs.len()
        ));
    }

    let outputs: Vec<RefOutput> = refs
        .par_iter()
        .map(|&i| process_reference(cfg, &lumas, frame_paths, mask_paths, i, single_pair))
        .collect();

    for out in outputs {
        report
            .timings_ms
            .push((out.status.frame_id.clone(), out.elapsed_ms));
        report.frames.push(out.status);
        report.plants.extend(out.plants);
        report.plant_errors.extend(out.plant_errors);
        report.warnings.extend(out.warnings);
        if let Some(v) = out.visuals {
            report.visuals.push(v);
        }
    }
    report
        .plants
        .sort_by(|a, b| (&a.frame_id, a.record.plant_id).cmp(&(&b.frame_id, b.record.plant_id)));
    report
        .plant_errors
        .sort_by(|a, b| (&a.frame_id, a.plant_id).cmp(&(&b.frame_id, b.plant_id)));
    Ok(report)
}

pub const CSV_HEADER: &str = "frame_id,plant_id,diameter_cm,volume_cm3,n_leaves_detected,total_LA_m2";

/// Write `plants.csv`, `plants.json`, and per-frame disparity and depth
/// PNGs. Timing data stays out so repeated runs produce identical bytes.
pub fn emit_outputs(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(dir).map_err(|source| PipelineError::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for fp in &report.plants {
        let r = &fp.record;
        writeln!(
            csv,
            "{},{},{:.4},{:.4},{},{:.6}",
            fp.frame_id,
            r.plant_id,
            r.head.diameter_cm,
            r.head.volume_cm3,
            r.leaves.len(),
            r.total_leaf_area_m2
        )
        .expect("string write");
    }
    let csv_path = dir.join("plants.csv");
    fs::write(&csv_path, csv).map_err(|source| PipelineError::Write {
        path: csv_path.clone(),
        source,
    })?;
    written.push(csv_path);

    #[derive(Serialize)]
    struct JsonReport<'a> {
        frames: &'a [FrameStatus],
        plants: &'a [FramePlant],
        plant_errors: &'a [PlantFailure],
        warnings: &'a [String],
        notes: &'a [String],
    }
    let json = serde_json::to_string_pretty(&JsonReport {
        frames: &report.frames,
        plants: &report.plants,
        plant_errors: &report.plant_errors,
        warnings: &report.warnings,
        notes: &report.notes,
    })
    .expect("report serialization is infallible");
    let json_path = dir.join("plants.json");
    fs::write(&json_path, json).map_err(|source| PipelineError::Write {
        path: json_path.clone(),
        source,
    })?;
    written.push(json_path);

    for vis in &report.visuals {
        let dpath = dir.join(format!("disparity_{}.png", vis.frame_id));
        io::save_disparity_png(&dpath, &vis.disparity).map_err(|source| PipelineError::Encode {
            path: dpath.clone(),
            source,
        })?;
        written.push(dpath);
        let zpath = dir.join(format!("depth_{}.png", vis.frame_id));
        io::save_depth_png(&zpath, &vis.depth).map_err(|source| PipelineError::Encode {
            path: zpath.clone(),
            source,
        })?;
        written.push(zpath);
    }
    Ok(written)
}
