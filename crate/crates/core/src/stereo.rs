//! Disparity from a rectified pair via semi-global matching, two-pair
//! fusion, and conversion to metric depth.
//!
//! The matching cost is a 5x5 census transform compared by Hamming
//! distance. Aggregation follows the classic multi-path recurrence
//!
//! ```text
//! L_r(p,d) = C(p,d) + min{ L_r(p-r,d),
//!                          L_r(p-r,d-1) + P1,
//!                          L_r(p-r,d+1) + P1,
//!                          min_k L_r(p-r,k) + P2 } - min_k L_r(p-r,k)
//! ```
//!
//! with `L_r = C` at path borders and `S = sum_r L_r`.

use crate::raster::{FloatRaster, GrayRaster, Raster};
use nalgebra::Matrix3;
use rayon::prelude::*;
use std::cell::UnsafeCell;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StereoError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
    #[error("disparity range must be at least 1, got {0}")]
    BadDisparityRange(usize),
    #[error("penalties must satisfy 0 < P1 <= P2, got P1={0} P2={1}")]
    BadPenalties(u16, u16),
    #[error("cost {max_cost} with P2={p2} would overflow the {paths}-path accumulator")]
    CostOverflow { max_cost: u16, p2: u16, paths: u16 },
    #[error("path direction must be one of the 8 unit steps, got ({0},{1})")]
    BadDirection(i32, i32),
    #[error("uniqueness ratio must be >= 1.0, got {0}")]
    BadUniqueness(f64),
    #[error("products reference different frames: \"{0}\" vs \"{1}\"")]
    FrameMismatch(String, String),
    #[error("rectification homography is singular")]
    SingularHomography,
}

/// Camera intrinsics plus the motion model that turns frame stride into a
/// stereo baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub focal_px: f64,
    pub principal: (f64, f64),
    /// Camera height above ground in cm.
    pub height_cm: f64,
    /// Platform speed in cm/s.
    pub speed_cm_s: f64,
    pub fps: f64,
    pub frame_stride: u32,
    /// Metric conversion constant: cm per pixel per cm of camera distance.
    /// The pinhole reading is 1/focal_px.
    pub k: f64,
}

impl CameraRig {
    pub fn new(focal_px: f64, cx: f64, cy: f64) -> Self {
        Self {
            focal_px,
            principal: (cx, cy),
            height_cm: 90.0,
            speed_cm_s: 100.0,
            fps: 60.0,
            frame_stride: 1,
            k: 1.0 / focal_px,
        }
    }

    /// Camera travel between the two frames of a pair.
    pub fn baseline_cm(&self) -> f64 {
        self.speed_cm_s * self.frame_stride as f64 / self.fps
    }
}

/// Census window geometry: 5x5 neighborhood, center excluded.
pub const CENSUS_BITS: u16 = 24;
/// Cost assigned when the shifted pixel falls outside the right image.
pub const CENSUS_OUT_OF_RANGE: u16 = CENSUS_BITS + 1;

/// Per-pixel matching cost over a disparity range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostVolume {
    width: usize,
    height: usize,
    d_max: usize,
    data: Vec<u16>,
}

impl CostVolume {
    pub fn new(width: usize, height: usize, d_max: usize) -> Result<Self, StereoError> {
        if d_max == 0 {
            return Err(StereoError::BadDisparityRange(d_max));
        }
        Ok(Self {
            width,
            height,
            d_max,
            data: vec![0; width * height * d_max],
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn d_max(&self) -> usize {
        self.d_max
    }

    #[inline]
    fn base(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.d_max
    }

    #[inline]
    pub fn cost(&self, x: usize, y: usize, d: usize) -> u16 {
        self.data[self.base(x, y) + d]
    }

    #[inline]
    pub fn set_cost(&mut self, x: usize, y: usize, d: usize, c: u16) {
        let i = self.base(x, y) + d;
        self.data[i] = c;
    }

    /// Cost slice for one pixel, indexed by disparity.
    pub fn costs_at(&self, x: usize, y: usize) -> &[u16] {
        let b = self.base(x, y);
        &self.data[b..b + self.d_max]
    }

    pub fn max_cost(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

fn census_signatures(img: &GrayRaster) -> Vec<u32> {
    let (w, h) = img.dims();
    let mut sigs = vec![0u32; w * h];
    for y in 0..h {
        for x in 0..w {
            let center = img.get(x, y);
            let mut sig = 0u32;
            for dy in -2i32..=2 {
                for dx in -2i32..=2 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                    let ny = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                    sig <<= 1;
                    if img.get(nx, ny) < center {
                        sig |= 1;
                    }
                }
            }
            sigs[y * w + x] = sig;
        }
    }
    sigs
}

/// Hamming cost between 5x5 census signatures of `left(x, y)` and
/// `right(x - d, y)`. Shifts leaving the right image cost
/// [`CENSUS_OUT_OF_RANGE`].
pub fn census_cost(
    left: &GrayRaster,
    right: &GrayRaster,
    d_max: usize,
) -> Result<CostVolume, StereoError> {
    if left.dims() != right.dims() {
        let (lw, lh) = left.dims();
        let (rw, rh) = right.dims();
        return Err(StereoError::DimMismatch(lw, lh, rw, rh));
    }
    let (w, h) = left.dims();
    let mut cv = CostVolume::new(w, h, d_max)?;
    let sig_l = census_signatures(left);
    let sig_r = census_signatures(right);
    cv.data
        .par_chunks_mut(w * d_max)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                let sl = sig_l[y * w + x];
                for d in 0..d_max {
                    row[x * d_max + d] = if d > x {
                        CENSUS_OUT_OF_RANGE
                    } else {
                        let sr = sig_r[y * w + x - d];
                        (sl ^ sr).count_ones() as u16
                    };
                }
            }
        });
    Ok(cv)
}

/// How many aggregation directions to sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathCount {
    Four,
    Eight,
}

impl PathCount {
    pub fn directions(self) -> &'static [(i32, i32)] {
        const FOUR: [(i32, i32); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
        const EIGHT: [(i32, i32); 8] = [
            (1, 0),
            (-1, 0),
            (0, 1),
            (0, -1),
            (1, 1),
            (-1, -1),
            (1, -1),
            (-1, 1),
        ];
        match self {
            PathCount::Four => &FOUR,
            PathCount::Eight => &EIGHT,
        }
    }
}

/// Semi-global matcher tuning. The defaults are the pipeline defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct SgmParams {
    pub d_max: usize,
    pub p1: u16,
    pub p2: u16,
    pub paths: PathCount,
    /// WTA minimum must beat the off-neighborhood runner-up by this ratio.
    pub uniqueness: f64,
    /// Disparities at or below this floor are unboundedly deep: invalid.
    pub d_min_valid: f64,
}

impl Default for SgmParams {
    fn default() -> Self {
        Self {
            d_max: 128,
            p1: 10,
            p2: 120,
            paths: PathCount::Eight,
            uniqueness: 1.05,
            d_min_valid: 0.5,
        }
    }
}

/// Accumulator shared across scanline workers. Within one direction every
/// scanline touches a disjoint pixel set, so concurrent `add` calls never
/// alias.
struct ScanlineSink<'a> {
    cells: &'a [UnsafeCell<u16>],
}

unsafe impl Sync for ScanlineSink<'_> {}

impl<'a> ScanlineSink<'a> {
    fn new(data: &'a mut [u16]) -> Self {
        let ptr = data as *mut [u16] as *const [UnsafeCell<u16>];
        Self {
            cells: unsafe { &*ptr },
        }
    }

    /// Safety: concurrent callers must pass disjoint indices.
    #[inline]
    unsafe fn add(&self, idx: usize, v: u16) {
        unsafe { *self.cells[idx].get() += v }
    }
}

fn validate_penalties(p1: u16, p2: u16) -> Result<(), StereoError> {
    if p1 == 0 || p1 > p2 {
        return Err(StereoError::BadPenalties(p1, p2));
    }
    Ok(())
}

fn check_overflow(cv: &CostVolume, p2: u16, paths: u16) -> Result<(), StereoError> {
    let max_cost = cv.max_cost();
    let per_path = max_cost as u32 + p2 as u32;
    if per_path * paths as u32 > u16::MAX as u32 {
        return Err(StereoError::CostOverflow { max_cost, p2, paths });
    }
    Ok(())
}

/// Scanline start pixels for a direction: pixels whose predecessor is
/// outside the image.
fn scanline_starts(w: usize, h: usize, (dx, dy): (i32, i32)) -> Vec<(usize, usize)> {
    let mut starts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let px = x as i32 - dx;
            let py = y as i32 - dy;
            if px < 0 || px >= w as i32 || py < 0 || py >= h as i32 {
                starts.push((x, y));
            }
        }
    }
    starts
}

/// Walk one scanline of the recurrence, adding L values into the sink.
///
/// Safety: the caller guarantees this scanline's pixels are not written by
/// any other concurrent walker.
unsafe fn walk_scanline(
    cv: &CostVolume,
    p1: u16,
    p2: u16,
    (dx, dy): (i32, i32),
    start: (usize, usize),
    sink: &ScanlineSink<'_>,
) {
    let (w, h) = (cv.width as i32, cv.height as i32);
    let d_max = cv.d_max;
    let mut prev = vec![0u16; d_max];
    let mut cur = vec![0u16; d_max];
    let (mut x, mut y) = (start.0 as i32, start.1 as i32);
    let mut first = true;
    while x >= 0 && x < w && y >= 0 && y < h {
        let base = (y as usize * cv.width + x as usize) * d_max;
        if first {
            cur.copy_from_slice(&cv.data[base..base + d_max]);
            first = false;
        } else {
            let prev_min = *prev.iter().min().expect("d_max >= 1");
            let jump = prev_min + p2;
            for d in 0..d_max {
                let mut best = prev[d];
                if d > 0 {
                    best = best.min(prev[d - 1] + p1);
                }
                if d + 1 < d_max {
                    best = best.min(prev[d + 1] + p1);
                }
                best = best.min(jump);
                cur[d] = cv.data[base + d] + best - prev_min;
            }
        }
        for (d, &c) in cur.iter().enumerate().take(d_max) {
            unsafe { sink.add(base + d, c) };
        }
        std::mem::swap(&mut prev, &mut cur);
        x += dx;
        y += dy;
    }
}

/// Single-direction aggregation: returns the L volume for one path.
pub fn aggregate_direction(
    cv: &CostVolume,
    p1: u16,
    p2: u16,
    direction: (i32, i32),
) -> Result<CostVolume, StereoError> {
    validate_penalties(p1, p2)?;
    check_overflow(cv, p2, 1)?;
    let (dx, dy) = direction;
    if dx.abs() > 1 || dy.abs() > 1 || (dx == 0 && dy == 0) {
        return Err(StereoError::BadDirection(dx, dy));
    }
    let mut out = CostVolume::new(cv.width, cv.height, cv.d_max)?;
    let starts = scanline_starts(cv.width, cv.height, direction);
    let sink = ScanlineSink::new(&mut out.data);
    starts.par_iter().for_each(|&start| unsafe {
        walk_scanline(cv, p1, p2, direction, start, &sink);
    });
    Ok(out)
}

/// Multi-path aggregation: S = sum of the per-direction L volumes.
pub fn aggregate(
    cv: &CostVolume,
    p1: u16,
    p2: u16,
    paths: PathCount,
) -> Result<CostVolume, StereoError> {
    validate_penalties(p1, p2)?;
    let dirs = paths.directions();
    check_overflow(cv, p2, dirs.len() as u16)?;
    let mut out = CostVolume::new(cv.width, cv.height, cv.d_max)?;
    for &dir in dirs {
        let starts = scanline_starts(cv.width, cv.height, dir);
        let sink = ScanlineSink::new(&mut out.data);
        starts.par_iter().for_each(|&start| unsafe {
            walk_scanline(cv, p1, p2, dir, start, &sink);
        });
    }
    Ok(out)
}

/// Winner-take-all disparity selection with parabola subpixel refinement.
///
/// A pixel is invalid when its minimum sits on the range border (no
/// parabola support) or when the runner-up outside the minimum's immediate
/// neighborhood is within the uniqueness ratio.
pub fn select_disparity(s: &CostVolume, uniqueness: f64) -> Result<FloatRaster, StereoError> {
    if uniqueness < 1.0 {
        return Err(StereoError::BadUniqueness(uniqueness));
    }
    let mut out = Raster::new(s.width, s.height, f32::NAN).expect("cost volume dims positive");
    let d_max = s.d_max;
    out.values_mut()
        .par_chunks_mut(s.width)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, slot) in row.iter_mut().enumerate() {
                let costs = s.costs_at(x, y);
                let mut d_star = 0usize;
                for d in 1..d_max {
                    if costs[d] < costs[d_star] {
                        d_star = d;
                    }
                }
                if d_star == 0 || d_star + 1 >= d_max {
                    continue;
                }
                let min1 = costs[d_star];
                let mut min2 = u16::MAX;
                for (d, &c) in costs.iter().enumerate() {
                    if d + 1 >= d_star && d <= d_star + 1 {
                        continue;
                    }
                    min2 = min2.min(c);
                }
                if min2 != u16::MAX {
                    let ratio = if min1 == 0 {
                        if min2 == 0 {
                            1.0
                        } else {
                            f64::INFINITY
                        }
                    } else {
                        min2 as f64 / min1 as f64
                    };
                    if ratio < uniqueness {
                        continue;
                    }
                }
                let (a, b, c) = (
                    costs[d_star - 1] as f64,
                    min1 as f64,
                    costs[d_star + 1] as f64,
                );
                let denom = 2.0 * (a - 2.0 * b + c);
                let delta = if denom.abs() < 1e-12 {
                    0.0
                } else {
                    (a - c) / denom
                };
                *slot = (d_star as f64 + delta) as f32;
            }
        });
    Ok(out)
}

/// Census cost, aggregation and selection in one call.
pub fn compute_disparity(
    left: &GrayRaster,
    right: &GrayRaster,
    params: &SgmParams,
) -> Result<FloatRaster, StereoError> {
    let cv = census_cost(left, right, params.d_max)?;
    let s = aggregate(&cv, params.p1, params.p2, params.paths)?;
    select_disparity(&s, params.uniqueness)
}

/// Triangulated depth for one disparity. At or below `d_min_valid` the
/// depth is unbounded and the invalid sentinel is returned. Depth is
/// strictly decreasing in disparity.
pub fn disparity_to_depth(d: f32, focal_px: f64, baseline_cm: f64, d_min_valid: f64) -> f32 {
    if d.is_nan() || (d as f64) <= d_min_valid {
        return f32::NAN;
    }
    (focal_px * baseline_cm / d as f64) as f32
}

/// One rectified pair's disparity plus what is needed to place it back in
/// the reference frame.
#[derive(Debug, Clone)]
pub struct DisparityProduct {
    pub disparity: FloatRaster,
    /// Maps rectified coordinates back to the reference frame.
    pub h_ref: Matrix3<f64>,
    pub baseline_cm: f64,
    /// Identifier of the reference frame both fusion inputs must share.
    pub frame_id: String,
    /// Reference frame dimensions (fusion output size).
    pub ref_dims: (usize, usize),
}

/// Per-pixel depth in reference-frame coordinates: the forward pair where
/// it has a valid disparity, the backward pair elsewhere, invalid if
/// neither resolves. Each product is scaled by its own baseline.
pub fn fuse(
    primary: &DisparityProduct,
    secondary: &DisparityProduct,
    rig: &CameraRig,
    d_min_valid: f64,
) -> Result<FloatRaster, StereoError> {
    if primary.frame_id != secondary.frame_id || primary.ref_dims != secondary.ref_dims {
        return Err(StereoError::FrameMismatch(
            primary.frame_id.clone(),
            secondary.frame_id.clone(),
        ));
    }
    let (w, h) = primary.ref_dims;
    let mut out = Raster::new(w, h, f32::NAN).expect("reference dims positive");
    let inv_p = primary
        .h_ref
        .try_inverse()
        .ok_or(StereoError::SingularHomography)?;
    let inv_s = secondary
        .h_ref
        .try_inverse()
        .ok_or(StereoError::SingularHomography)?;

    let sample = |prod: &DisparityProduct, inv: &Matrix3<f64>, x: usize, y: usize| -> f32 {
        let p = inv * nalgebra::Vector3::new(x as f64, y as f64, 1.0);
        if p.z.abs() < 1e-12 {
            return f32::NAN;
        }
        let (u, v) = (p.x / p.z, p.y / p.z);
        let (du, dv) = (u.round(), v.round());
        let (dw, dh) = prod.disparity.dims();
        if du < 0.0 || dv < 0.0 || du >= dw as f64 || dv >= dh as f64 {
            return f32::NAN;
        }
        let d = prod.disparity.get(du as usize, dv as usize);
        disparity_to_depth(d, rig.focal_px, prod.baseline_cm, d_min_valid)
    };

    for y in 0..h {
        for x in 0..w {
            let z = sample(primary, &inv_p, x, y);
            let z = if z.is_nan() {
                sample(secondary, &inv_s, x, y)
            } else {
                z
            };
            out.set(x, y, z);
        }
    }
    Ok(out)
}
