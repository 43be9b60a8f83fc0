//! Blob-feature detection and descriptor matching between consecutive
//! frames.
//!
//! Detection finds local maxima of the determinant-of-Hessian response,
//! approximated with integral-image box filters at four octaves of four
//! filter sizes each. Descriptors are the upright 64-component variant
//! (orientation fixed at zero; the camera never rotates): Haar-wavelet
//! sums over a 4x4 grid of subregions, normalized to unit length.
//! Intensities are scaled to [0, 1], so detection thresholds are relative
//! to the full 8-bit dynamic range.

use crate::raster::GrayRaster;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image is {0}x{1}, detection needs at least {2}x{2}")]
    TooSmall(usize, usize, usize),
    #[error("detection threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("ratio must lie strictly between 0 and 1, got {0}")]
    BadRatio(f64),
}

pub const MIN_IMAGE_SIDE: usize = 32;

/// Filter side lengths per octave. Responses are sampled at every pixel
/// for all octaves so that integer image shifts move keypoints exactly
/// and a 90-degree rotation permutes them exactly.
const FILTER_SIZES: [[usize; 4]; 4] = [
    [9, 15, 21, 27],
    [15, 27, 39, 51],
    [27, 51, 75, 99],
    [51, 99, 147, 195],
];

/// Scale assigned to a filter of side L (the 9-px base filter maps to 1.2).
fn filter_scale(l: f64) -> f64 {
    1.2 * l / 9.0
}

/// Summed-area table over intensities scaled to [0, 1].
pub struct IntegralImage {
    width: usize,
    height: usize,
    /// (width+1) x (height+1), row-major, zero top/left border.
    data: Vec<f64>,
}

impl IntegralImage {
    pub fn new(img: &GrayRaster) -> Self {
        let (w, h) = img.dims();
        let stride = w + 1;
        let mut data = vec![0.0f64; stride * (h + 1)];
        for y in 0..h {
            let mut row_sum = 0.0;
            for x in 0..w {
                row_sum += img.get(x, y) as f64 / 255.0;
                data[(y + 1) * stride + x + 1] = data[y * stride + x + 1] + row_sum;
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * (self.width + 1) + x]
    }

    /// Sum of pixels in [x, x+bw) x [y, y+bh), clamped to the image.
    pub fn box_sum(&self, x: i64, y: i64, bw: i64, bh: i64) -> f64 {
        let x0 = x.clamp(0, self.width as i64) as usize;
        let y0 = y.clamp(0, self.height as i64) as usize;
        let x1 = (x + bw).clamp(0, self.width as i64) as usize;
        let y1 = (y + bh).clamp(0, self.height as i64) as usize;
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        self.at(x1, y1) - self.at(x0, y1) - self.at(x1, y0) + self.at(x0, y0)
    }

    /// Horizontal Haar wavelet: right half minus left half of an
    /// edge-length `size` window centered at (x, y).
    pub fn haar_x(&self, x: i64, y: i64, size: i64) -> f64 {
        let half = size / 2;
        self.box_sum(x, y - half, half, size) - self.box_sum(x - half, y - half, half, size)
    }

    /// Vertical Haar wavelet: bottom half minus top half.
    pub fn haar_y(&self, x: i64, y: i64, size: i64) -> f64 {
        let half = size / 2;
        self.box_sum(x - half, y, size, half) - self.box_sum(x - half, y - half, size, half)
    }
}

/// Scale-space blob detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    /// Determinant-of-Hessian strength at the detected maximum.
    pub response: f64,
    /// Always 0 here: the upright variant skips orientation assignment.
    pub orientation: f64,
}

/// One determinant-of-Hessian response map, sampled at every pixel.
struct ResponseMap {
    grid_w: usize,
    grid_h: usize,
    filter: usize,
    values: Vec<f64>,
}

impl ResponseMap {
    #[inline]
    fn get(&self, c: usize, r: usize) -> f64 {
        self.values[r * self.grid_w + c]
    }
}

fn build_response_map(ii: &IntegralImage, filter: usize) -> ResponseMap {
    let grid_w = ii.width;
    let grid_h = ii.height;
    let lobe = (filter / 3) as i64;
    let border = ((filter - 1) / 2) as i64;
    let size = filter as i64;
    let inv_area = 1.0 / (filter * filter) as f64;
    let w = ii.width as i64;
    let h = ii.height as i64;

    let mut values = vec![0.0f64; grid_w * grid_h];
    values
        .par_chunks_mut(grid_w)
        .enumerate()
        .for_each(|(r, row)| {
            let y = r as i64;
            if y < border || y + border >= h {
                return;
            }
            for (c, slot) in row.iter_mut().enumerate() {
                let x = c as i64;
                if x < border || x + border >= w {
                    continue;
                }
                let dxx = ii.box_sum(x - border, y - lobe + 1, size, 2 * lobe - 1)
                    - 3.0 * ii.box_sum(x - lobe / 2, y - lobe + 1, lobe, 2 * lobe - 1);
                let dyy = ii.box_sum(x - lobe + 1, y - border, 2 * lobe - 1, size)
                    - 3.0 * ii.box_sum(x - lobe + 1, y - lobe / 2, 2 * lobe - 1, lobe);
                let dxy = ii.box_sum(x + 1, y - lobe, lobe, lobe)
                    + ii.box_sum(x - lobe, y + 1, lobe, lobe)
                    - ii.box_sum(x - lobe, y - lobe, lobe, lobe)
                    - ii.box_sum(x + 1, y + 1, lobe, lobe);
                let (dxx, dyy, dxy) = (dxx * inv_area, dyy * inv_area, dxy * inv_area);
                *slot = dxx * dyy - 0.81 * dxy * dxy;
            }
        });

    ResponseMap {
        grid_w,
        grid_h,
        filter,
        values,
    }
}

/// 3-D quadratic refinement around a grid maximum. Returns the offset in
/// (column, row, interval) grid units, or None when the fit diverges.
fn interpolate_extremum(
    below: &ResponseMap,
    mid: &ResponseMap,
    above: &ResponseMap,
    c: usize,
    r: usize,
) -> Option<Vector3<f64>> {
    let v = |m: &ResponseMap, dc: i64, dr: i64| {
        m.get((c as i64 + dc) as usize, (r as i64 + dr) as usize)
    };
    let dx = (v(mid, 1, 0) - v(mid, -1, 0)) / 2.0;
    let dy = (v(mid, 0, 1) - v(mid, 0, -1)) / 2.0;
    let ds = (v(above, 0, 0) - v(below, 0, 0)) / 2.0;

    let center = v(mid, 0, 0);
    let dxx = v(mid, 1, 0) + v(mid, -1, 0) - 2.0 * center;
    let dyy = v(mid, 0, 1) + v(mid, 0, -1) - 2.0 * center;
    let dss = v(above, 0, 0) + v(below, 0, 0) - 2.0 * center;
    let dxy = (v(mid, 1, 1) - v(mid, -1, 1) - v(mid, 1, -1) + v(mid, -1, -1)) / 4.0;
    let dxs = (v(above, 1, 0) - v(above, -1, 0) - v(below, 1, 0) + v(below, -1, 0)) / 4.0;
    let dys = (v(above, 0, 1) - v(above, 0, -1) - v(below, 0, 1) + v(below, 0, -1)) / 4.0;

    let hess = Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
    let grad = Vector3::new(dx, dy, ds);
    let delta = hess.lu().solve(&(-grad))?;
    if delta.iter().any(|d| d.abs() >= 0.5) {
        return None;
    }
    Some(delta)
}

/// Greedy near-duplicate suppression: keypoints reported by overlapping
/// filter sizes of adjacent octaves collapse onto the strongest response.
fn dedupe(mut kps: Vec<Keypoint>) -> Vec<Keypoint> {
    kps.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
            .then(a.scale.total_cmp(&b.scale))
    });
    let mut kept: Vec<Keypoint> = Vec::with_capacity(kps.len());
    for kp in kps {
        let dup = kept.iter().any(|q| {
            let (lo, hi) = if q.scale < kp.scale {
                (q.scale, kp.scale)
            } else {
                (kp.scale, q.scale)
            };
            if hi / lo >= 1.5 {
                return false;
            }
            let (dx, dy) = (q.x - kp.x, q.y - kp.y);
            let tol = 0.5 * lo;
            dx * dx + dy * dy <= tol * tol
        });
        if !dup {
            kept.push(kp);
        }
    }
    kept
}

/// Detect scale-space blob keypoints with responses above `threshold`.
///
/// The result is sorted by response (strongest first) and is deterministic
/// for identical input.
pub fn detect(img: &GrayRaster, threshold: f64) -> Result<Vec<Keypoint>, FeatureError> {
    let (w, h) = img.dims();
    if w < MIN_IMAGE_SIDE || h < MIN_IMAGE_SIDE {
        return Err(FeatureError::TooSmall(w, h, MIN_IMAGE_SIDE));
    }
    if threshold <= 0.0 {
        return Err(FeatureError::BadThreshold(threshold));
    }
    let ii = IntegralImage::new(img);
    let mut found = Vec::new();
    for sizes in &FILTER_SIZES {
        let maps: Vec<ResponseMap> = sizes
            .iter()
            .map(|&f| build_response_map(&ii, f))
            .collect();
        let filter_step = (sizes[1] - sizes[0]) as f64;
        for i in 1..=2 {
            let (below, mid, above) = (&maps[i - 1], &maps[i], &maps[i + 1]);
            for r in 1..mid.grid_h.saturating_sub(1) {
                'candidates: for c in 1..mid.grid_w - 1 {
                    let v = mid.get(c, r);
                    if v <= threshold {
                        continue;
                    }
                    for m in [below, mid, above] {
                        for dr in -1i64..=1 {
                            for dc in -1i64..=1 {
                                let neighbor =
                                    m.get((c as i64 + dc) as usize, (r as i64 + dr) as usize);
                                if std::ptr::eq(m, mid) && dr == 0 && dc == 0 {
                                    continue;
                                }
                                if neighbor >= v {
                                    continue 'candidates;
                                }
                            }
                        }
                    }
                    let Some(delta) = interpolate_extremum(below, mid, above, c, r) else {
                        continue;
                    };
                    let x = c as f64 + delta.x;
                    let y = r as f64 + delta.y;
                    let filter = mid.filter as f64 + delta.z * filter_step;
                    found.push(Keypoint {
                        x,
                        y,
                        scale: filter_scale(filter),
                        response: v,
                        orientation: 0.0,
                    });
                }
            }
        }
    }
    Ok(dedupe(found))
}

/// 64-component unit-norm patch descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor(pub [f64; 64]);

impl Descriptor {
    pub fn distance(&self, other: &Descriptor) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Descriptors for the keypoints that carry enough margin, plus the
/// indices of those dropped for sitting too close to the border.
#[derive(Debug, Clone)]
pub struct DescribeResult {
    /// Kept keypoints, same order as `descriptors`.
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
    /// Input indices skipped because the 10-scale margin left the image.
    pub dropped: Vec<usize>,
}

fn describe_one(ii: &IntegralImage, kp: &Keypoint) -> Descriptor {
    let s = kp.scale;
    let haar = 2 * s.round().max(1.0) as i64;
    let sigma = 3.3;
    let mut out = [0.0f64; 64];
    let mut idx = 0;
    for sub_i in 0..4 {
        for sub_j in 0..4 {
            let (mut sdx, mut sdy, mut sadx, mut sady) = (0.0, 0.0, 0.0, 0.0);
            for k in 0..5 {
                for l in 0..5 {
                    // Sample offsets in scale units, symmetric about the
                    // keypoint: -9.5, -8.5, ..., +9.5.
                    let u = (sub_i * 5 + k) as f64 - 9.5;
                    let v = (sub_j * 5 + l) as f64 - 9.5;
                    let sx = (kp.x + u * s).round() as i64;
                    let sy = (kp.y + v * s).round() as i64;
                    let g = (-(u * u + v * v) / (2.0 * sigma * sigma)).exp();
                    let dx = g * ii.haar_x(sx, sy, haar);
                    let dy = g * ii.haar_y(sx, sy, haar);
                    sdx += dx;
                    sdy += dy;
                    sadx += dx.abs();
                    sady += dy.abs();
                }
            }
            out[idx] = sdx;
            out[idx + 1] = sdy;
            out[idx + 2] = sadx;
            out[idx + 3] = sady;
            idx += 4;
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for v in &mut out {
            *v /= norm;
        }
    }
    Descriptor(out)
}

/// Build descriptors for keypoints with at least 10 scales of margin on
/// every side; the rest are dropped and reported.
pub fn describe(img: &GrayRaster, kps: &[Keypoint]) -> DescribeResult {
    let ii = IntegralImage::new(img);
    let (w, h) = img.dims();
    let mut keypoints = Vec::new();
    let mut dropped = Vec::new();
    for (i, kp) in kps.iter().enumerate() {
        let m = 10.0 * kp.scale;
        if kp.x < m || kp.y < m || kp.x > w as f64 - 1.0 - m || kp.y > h as f64 - 1.0 - m {
            dropped.push(i);
        } else {
            keypoints.push(kp.clone());
        }
    }
    let descriptors: Vec<Descriptor> = keypoints.par_iter().map(|kp| describe_one(&ii, kp)).collect();
    DescribeResult {
        keypoints,
        descriptors,
        dropped,
    }
}

/// Detection and description in one pass.
pub fn detect_and_describe(
    img: &GrayRaster,
    threshold: f64,
) -> Result<(Vec<Keypoint>, Vec<Descriptor>), FeatureError> {
    let kps = detect(img, threshold)?;
    let described = describe(img, &kps);
    Ok((described.keypoints, described.descriptors))
}

/// A nearest-neighbor correspondence accepted by the ratio test.
#[derive(Debug, Clone, PartialEq)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f64,
}

/// Lowe ratio matching: a query keeps its nearest neighbor in `b` only
/// when it beats the second-nearest by the ratio (strict). Fewer than two
/// candidates leave every query unmatched.
pub fn match_descriptors(
    a: &[Descriptor],
    b: &[Descriptor],
    ratio: f64,
) -> Result<Vec<Match>, FeatureError> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(FeatureError::BadRatio(ratio));
    }
    if b.len() < 2 {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (ia, da) in a.iter().enumerate() {
        let mut best = (usize::MAX, f64::INFINITY);
        let mut second = f64::INFINITY;
        for (ib, db) in b.iter().enumerate() {
            let d = da.distance(db);
            if d < best.1 {
                second = best.1;
                best = (ib, d);
            } else if d < second {
                second = d;
            }
        }
        if second > 0.0 && best.1 / second < ratio {
            out.push(Match {
                index_a: ia,
                index_b: best.0,
                distance: best.1,
            });
        }
    }
    Ok(out)
}
