//! Two-view geometry: fundamental-matrix estimation from point matches
//! and projective rectification of a frame pair.
//!
//! Estimation runs RANSAC over Hartley-normalized 8-point solves with
//! Sampson-distance scoring, then refits on the consensus set. The
//! rectifying pair sends the second image's epipole to infinity and
//! aligns the first image through the compatible homography that best
//! transfers the inliers onto their mates, which keeps the matching
//! search range small at the source image's resolution.

use crate::raster::{BitMask, GrayRaster, Raster};
use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};
use rand::prelude::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EpipolarError {
    #[error("need at least 8 matches, got {0}")]
    TooFewMatches(usize),
    #[error("degenerate geometry: no consensus of at least 8 inliers")]
    DegenerateGeometry,
    #[error("rectification degenerate: epipole at ({0:.1}, {1:.1}) lies inside the image")]
    EpipoleInsideImage(f64, f64),
    #[error("rectification unstable: output would be {0}x{1}")]
    RectificationUnstable(usize, usize),
    #[error("rectification failed row alignment: residual {0:.3} px")]
    RowAlignment(f64),
    #[error("homography is singular")]
    SingularHomography,
    #[error("inlier threshold must be positive, got {0}")]
    BadThreshold(f64),
}

/// A correspondence between a point in image a and one in image b.
pub type PointPair = ((f64, f64), (f64, f64));

/// Rank-2 fundamental matrix with Frobenius norm 1, mapping points of
/// image a to epipolar lines of image b.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalMatrix(pub Matrix3<f64>);

fn hom(p: (f64, f64)) -> Vector3<f64> {
    Vector3::new(p.0, p.1, 1.0)
}

fn dehom(v: &Vector3<f64>) -> (f64, f64) {
    (v.x / v.z, v.y / v.z)
}

/// First-order geometric reprojection error of a correspondence, in px.
pub fn sampson_distance(f: &Matrix3<f64>, pair: &PointPair) -> f64 {
    let x = hom(pair.0);
    let xp = hom(pair.1);
    let fx = f * x;
    let ftxp = f.transpose() * xp;
    let num = xp.dot(&fx);
    let den = fx.x * fx.x + fx.y * fx.y + ftxp.x * ftxp.x + ftxp.y * ftxp.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    (num * num / den).sqrt()
}

/// Similarity moving the centroid to the origin and the RMS radius to
/// sqrt(2), for numerical conditioning of the linear solve.
fn normalizing_transform(pts: impl Iterator<Item = (f64, f64)> + Clone) -> Matrix3<f64> {
    let mut n = 0usize;
    let (mut cx, mut cy) = (0.0, 0.0);
    for (x, y) in pts.clone() {
        cx += x;
        cy += y;
        n += 1;
    }
    let n = n.max(1) as f64;
    cx /= n;
    cy /= n;
    let mut ms = 0.0;
    for (x, y) in pts {
        ms += (x - cx) * (x - cx) + (y - cy) * (y - cy);
    }
    let rms = (ms / n).sqrt();
    let s = if rms > 1e-12 { (2.0f64).sqrt() / rms } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Normalized 8-point solve with rank-2 enforcement; None when the
/// system is too degenerate to produce a finite matrix.
fn eight_point(pairs: &[PointPair]) -> Option<Matrix3<f64>> {
    let ta = normalizing_transform(pairs.iter().map(|p| p.0));
    let tb = normalizing_transform(pairs.iter().map(|p| p.1));
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for pair in pairs {
        let a = ta * hom(pair.0);
        let b = tb * hom(pair.1);
        let row = SVector::<f64, 9>::from_column_slice(&[
            b.x * a.x,
            b.x * a.y,
            b.x,
            b.y * a.x,
            b.y * a.y,
            b.y,
            a.x,
            a.y,
            1.0,
        ]);
        ata += row * row.transpose();
    }
    let eig = ata.symmetric_eigen();
    let mut min_i = 0;
    for i in 1..9 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_i] {
            min_i = i;
        }
    }
    let f = eig.eigenvectors.column(min_i);
    let fn_mat = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);
    // Rank-2: truncate the smsmallest singular value, then denormalize.
    let svd = fn_mat.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let s = Matrix3::from_diagonal(&Vector3::new(
        svd.singular_values[0],
        svd.singular_values[1],
        0.0,
    ));
    let mut f = tb.transpose() * u * s * v_t * ta;
    let norm = f.norm();
    if !norm.is_finite() || norm <= 1e-15 {
        return None;
    }
    f /= norm;
    // Deterministic sign: largest-magnitude entry positive.
    let mut lead = 0.0f64;
    for v in f.iter() {
        if v.abs() > lead.abs() {
            lead = *v;
        }
    }
    if lead < 0.0 {
        f = -f;
    }
    Some(f)
}

/// RANSAC fundamental-matrix estimation. Returns the refit matrix and
/// the indices of pairs within `inlier_thresh` Sampson distance of it.
pub fn estimate_fundamental(
    pairs: &[PointPair],
    inlier_thresh: f64,
    max_iters: usize,
    seed: u64,
) -> Result<(FundamentalMatrix, Vec<usize>), EpipolarError> {
    if pairs.len() < 8 {
        return Err(EpipolarError::TooFewMatches(pairs.len()));
    }
    if inlier_thresh <= 0.0 {
        return Err(EpipolarError::BadThreshold(inlier_thresh));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<usize> = (0..pairs.len()).collect();

    // Truncated Sampson scoring: between candidates gating the same
    // consensus, the one fitting it tightly wins. Counting alone cannot
    // separate the true geometry from a wrong-epipole candidate when
    // most matches lie on one scene plane, since plane matches fit a
    // whole family of fundamental matrices.
    let thresh_sq = inlier_thresh * inlier_thresh;
    let mut best_score = f64::INFINITY;
    let mut best_count = 0usize;
    let mut best_f: Option<Matrix3<f64>> = None;
    let mut needed = max_iters.max(1);
    let mut it = 0;
    while it < needed {
        it += 1;
        let sample: Vec<PointPair> = indices
            .choose_multiple(&mut rng, 8)
            .map(|&i| pairs[i])
            .collect();
        let Some(f) = eight_point(&sample) else {
            continue;
        };
        let mut score = 0.0;
        let mut count = 0usize;
        for p in pairs {
            let d = sampson_distance(&f, p);
            if d <= inlier_thresh {
                score += d * d;
                count += 1;
            } else {
                score += thresh_sq;
            }
        }
        if score < best_score {
            best_score = score;
            best_count = count;
            best_f = Some(f);
            let w = count as f64 / pairs.len() as f64;
            let denom = (1.0 - w.powi(8)).max(f64::MIN_POSITIVE).ln();
            if denom < 0.0 {
                let est = ((1.0f64 - 0.99).ln() / denom).ceil();
                // Keep sampling past the coverage estimate: candidates
                // that gate the same consensus still differ in score.
                needed = (est as usize).max(MIN_RANSAC_ITERS).min(max_iters.max(1));
            }
        }
    }
    let Some(f0) = best_f else {
        return Err(EpipolarError::DegenerateGeometry);
    };
    if best_count < 8 {
        return Err(EpipolarError::DegenerateGeometry);
    }

    // Refit on the consensus set, then reselect inliers under the refit.
    let consensus: Vec<PointPair> = pairs
        .iter()
        .filter(|p| sampson_distance(&f0, p) <= inlier_thresh)
        .copied()
        .collect();
    let f = eight_point(&consensus).ok_or(EpipolarError::DegenerateGeometry)?;
    let inliers: Vec<usize> = (0..pairs.len())
        .filter(|&i| sampson_distance(&f, &pairs[i]) <= inlier_thresh)
        .collect();
    if inliers.len() < 8 {
        return Err(EpipolarError::DegenerateGeometry);
    }
    Ok((FundamentalMatrix(f), inliers))
}

/// Homographies rectifying a frame pair onto a shared grid. The
/// alignment step recenters and shifts grid disparities, so metric depth
/// must map them back through the stored inverses.
#[derive(Debug, Clone)]
pub struct RectifyingPair {
    pub h1: Matrix3<f64>,
    pub h2: Matrix3<f64>,
    pub out_dims: (usize, usize),
    h1_inv: Matrix3<f64>,
    h2_inv: Matrix3<f64>,
}

impl RectifyingPair {
    /// Exact x-disparity of the original pair for a grid point (x, y)
    /// carrying grid disparity d: both grid endpoints are mapped back to
    /// their source images and their x coordinates differenced.
    pub fn original_disparity(&self, x: f64, y: f64, d: f64) -> f64 {
        let pa = self.h1_inv * Vector3::new(x, y, 1.0);
        let pb = self.h2_inv * Vector3::new(x - d, y, 1.0);
        pa.x / pa.z - pb.x / pb.z
    }

    /// Grid x-disparity of a source correspondence, for checking that
    /// matched content lands inside the disparity search range.
    pub fn grid_disparity(&self, pair: &PointPair) -> f64 {
        let pa = self.h1 * Vector3::new(pair.0 .0, pair.0 .1, 1.0);
        let pb = self.h2 * Vector3::new(pair.1 .0, pair.1 .1, 1.0);
        pa.x / pa.z - pb.x / pb.z
    }

    /// Grid position of an image-a point, for sampling the disparity
    /// raster from reference-frame coordinates.
    pub fn to_grid(&self, x: f64, y: f64) -> (f64, f64) {
        dehom(&(self.h1 * Vector3::new(x, y, 1.0)))
    }
}

fn epipole_inside(e: &Vector3<f64>, dims: (usize, usize)) -> Option<(f64, f64)> {
    if e.z.abs() <= 1e-9 * (e.x.abs() + e.y.abs()) {
        return None;
    }
    let (x, y) = dehom(e);
    if x >= 0.0 && x <= dims.0 as f64 - 1.0 && y >= 0.0 && y <= dims.1 as f64 - 1.0 {
        Some((x, y))
    } else {
        None
    }
}

fn cross_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Sampling floor once a candidate covers most matches; see the scoring
/// note in `estimate_fundamental`.
const MIN_RANSAC_ITERS: usize = 64;

/// Margin kept below the smallest inlier disparity on the shared grid.
const DISPARITY_MARGIN: f64 = 2.0;
/// Output area may grow at most this much relative to the input.
const MAX_AREA_GROWTH: f64 = 32.0;
const ROW_RESIDUAL_LIMIT: f64 = 0.5;

/// Build the rectifying pair for images of size `dims` from a
/// fundamental matrix and its inlier correspondences.
pub fn rectify(
    f: &FundamentalMatrix,
    inliers: &[PointPair],
    dims: (usize, usize),
) -> Result<RectifyingPair, EpipolarError> {
    let (w, h) = (dims.0 as f64, dims.1 as f64);
    let svd = f.0.svd(true, true);
    let u = svd.u.ok_or(EpipolarError::DegenerateGeometry)?;
    let v_t = svd.v_t.ok_or(EpipolarError::DegenerateGeometry)?;
    // Right null vector: epipole in image a; left: image b.
    let e1: Vector3<f64> = v_t.row(2).transpose();
    let e2: Vector3<f64> = u.column(2).into();
    for e in [&e1, &e2] {
        if let Some((x, y)) = epipole_inside(e, dims) {
            return Err(EpipolarError::EpipoleInsideImage(x, y));
        }
    }

    // Move the image center to the origin, rotate the epipole onto the
    // +x axis, then send it to infinity.
    let t = Matrix3::new(
        1.0,
        0.0,
        -(w - 1.0) / 2.0,
        0.0,
        1.0,
        -(h - 1.0) / 2.0,
        0.0,
        0.0,
        1.0,
    );
    let et = t * e2;
    let r = et.x.hypot(et.y);
    let (cos_a, sin_a) = if r > 1e-15 {
        (et.x / r, et.y / r)
    } else {
        (1.0, 0.0)
    };
    let rot = Matrix3::new(cos_a, sin_a, 0.0, -sin_a, cos_a, 0.0, 0.0, 0.0, 1.0);
    let g = if et.z.abs() <= 1e-12 * r {
        Matrix3::identity()
    } else {
        Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -et.z / r, 0.0, 1.0)
    };
    let h2 = g * rot * t;

    // Matched transform for image a: the homography compatible with F
    // that best transfers the inliers onto their mates in the second
    // image, composed with that image's rectifier. A compatible map
    // sends every point onto its own epipolar line, which h2 turns
    // horizontal, so rows stay aligned no matter how well the transfer
    // fits. Fitting both coordinates pins the map to the dominant scene
    // surface; the shared grid then keeps the source image's local
    // scale and disparity reduces to parallax about that surface, which
    // keeps the matching search range small. Fitting grid x-disparity
    // alone would leave the scale free, and a depth-degenerate support
    // can drag such a fit into a gauge that squashes or overflows the
    // search range.
    let e2n = e2 / e2.norm();
    let m = cross_matrix(&e2n) * f.0 + e2n * Vector3::new(1.0, 1.0, 1.0).transpose();

    let n = inliers.len();
    if n < 3 {
        return Err(EpipolarError::DegenerateGeometry);
    }
    // Transfer residual cross(m pa + e2n (v . pa), pb) is linear in v.
    let mut a_mat = DMatrix::<f64>::zeros(3 * n, 3);
    let mut rhs = DVector::<f64>::zeros(3 * n);
    for (i, pair) in inliers.iter().enumerate() {
        let pa = hom(pair.0);
        let pb = hom(pair.1);
        let cross_m = (m * pa).cross(&pb);
        let cross_e = e2n.cross(&pb);
        for r in 0..3 {
            a_mat.row_mut(3 * i + r).copy_from(&(pa * cross_e[r]).transpose());
            rhs[3 * i + r] = -cross_m[r];
        }
    }
    let v = a_mat
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|_| EpipolarError::DegenerateGeometry)?;
    let h_fit = m + e2n * Vector3::new(v[0], v[1], v[2]).transpose();
    let mut h1 = h2 * h_fit;

    let map = |hm: &Matrix3<f64>, p: (f64, f64)| dehom(&(hm * hom(p)));

    // Keep every inlier disparity positive on the shared grid.
    let disparities: Vec<f64> = inliers
        .iter()
        .map(|pair| map(&h1, pair.0).0 - map(&h2, pair.1).0)
        .collect();
    let min_d = disparities.iter().cloned().fold(f64::INFINITY, f64::min);
    if !min_d.is_finite() {
        return Err(EpipolarError::DegenerateGeometry);
    }
    let shift = Matrix3::new(
        1.0,
        0.0,
        DISPARITY_MARGIN - min_d,
        0.0,
        1.0,
        0.0,
        0.0,
        0.0,
        1.0,
    );
    h1 = shift * h1;

    // Translate both onto a common positive quadrant.
    let corners = [(0.0, 0.0), (w - 1.0, 0.0), (0.0, h - 1.0), (w - 1.0, h - 1.0)];
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for hm in [&h1, &h2] {
        for &c in &corners {
            let (x, y) = map(hm, c);
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
    }
    if !(min_x.is_finite() && min_y.is_finite() && max_x.is_finite() && max_y.is_finite()) {
        return Err(EpipolarError::DegenerateGeometry);
    }
    let back = Matrix3::new(1.0, 0.0, -min_x, 0.0, 1.0, -min_y, 0.0, 0.0, 1.0);
    let h1 = back * h1;
    let h2 = back * h2;
    let out_w = (max_x - min_x).ceil() as usize + 1;
    let out_h = (max_y - min_y).ceil() as usize + 1;
    let grown = (out_w * out_h) as f64 / (w * h);
    if out_w == 0 || out_h == 0 || grown > MAX_AREA_GROWTH {
        return Err(EpipolarError::RectificationUnstable(out_w, out_h));
    }

    // Row alignment must hold on the inliers or the pair is unusable.
    let mut residual = 0.0f64;
    for pair in inliers {
        let ya = map(&h1, pair.0).1;
        let yb = map(&h2, pair.1).1;
        residual = residual.max((ya - yb).abs());
    }
    if residual > ROW_RESIDUAL_LIMIT {
        return Err(EpipolarError::RowAlignment(residual));
    }

    let h1_inv = h1.try_inverse().ok_or(EpipolarError::SingularHomography)?;
    let h2_inv = h2.try_inverse().ok_or(EpipolarError::SingularHomography)?;
    Ok(RectifyingPair {
        h1,
        h2,
        out_dims: (out_w, out_h),
        h1_inv,
        h2_inv,
    })
}

/// An image resampled through a homography, with the pixels that fell
/// outside the source marked invalid.
#[derive(Debug, Clone)]
pub struct WarpedImage {
    pub image: GrayRaster,
    pub valid: BitMask,
}

/// Inverse-map `img` through `h` onto an `out_dims` grid with bilinear
/// interpolation. Out-of-source pixels are black and flagged invalid.
pub fn warp(
    img: &GrayRaster,
    h: &Matrix3<f64>,
    out_dims: (usize, usize),
) -> Result<WarpedImage, EpipolarError> {
    let h_inv = h.try_inverse().ok_or(EpipolarError::SingularHomography)?;
    let (ow, oh) = out_dims;
    let (sw, sh) = img.dims();
    let mut out = Raster::new(ow, oh, 0u8).map_err(|_| EpipolarError::SingularHomography)?;
    let mut valid = BitMask::new(ow, oh).map_err(|_| EpipolarError::SingularHomography)?;
    for y in 0..oh {
        for x in 0..ow {
            let src = h_inv * Vector3::new(x as f64, y as f64, 1.0);
            if src.z.abs() < 1e-12 {
                continue;
            }
            let (sx, sy) = dehom(&src);
            if sx < 0.0 || sy < 0.0 || sx > sw as f64 - 1.0 || sy > sh as f64 - 1.0 {
                continue;
            }
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let y1 = (y0 + 1).min(sh - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let v00 = img.get(x0, y0) as f64;
            let v10 = img.get(x1, y0) as f64;
            let v01 = img.get(x0, y1) as f64;
            let v11 = img.get(x1, y1) as f64;
            let v = v00 * (1.0 - fx) * (1.0 - fy)
                + v10 * fx * (1.0 - fy)
                + v01 * (1.0 - fx) * fy
                + v11 * fx * fy;
            out.set(x, y, v.round().clamp(0.0, 255.0) as u8);
            valid.set(x, y, true);
        }
    }
    Ok(WarpedImage { image: out, valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn camera_k() -> Matrix3<f64> {
        Matrix3::new(800.0, 0.0, 320.0, 0.0, 800.0, 240.0, 0.0, 0.0, 1.0)
    }

    fn rot_y(deg: f64) -> Matrix3<f64> {
        let a = deg.to_radians();
        Matrix3::new(a.cos(), 0.0, a.sin(), 0.0, 1.0, 0.0, -a.sin(), 0.0, a.cos())
    }

    fn rot_x(deg: f64) -> Matrix3<f64> {
        let a = deg.to_radians();
        Matrix3::new(1.0, 0.0, 0.0, 0.0, a.cos(), -a.sin(), 0.0, a.sin(), a.cos())
    }

    fn project(k: &Matrix3<f64>, r: &Matrix3<f64>, t: &Vector3<f64>, p: &Vector3<f64>) -> (f64, f64) {
        let c = k * (r * p + t);
        (c.x / c.z, c.y / c.z)
    }

    /// Pairs from two poses: a at the origin, b at rotation r / offset t.
    fn synthetic_pairs(
        n: usize,
        r: &Matrix3<f64>,
        t: &Vector3<f64>,
        seed: u64,
    ) -> Vec<PointPair> {
        let k = camera_k();
        let ident = Matrix3::identity();
        let zero = Vector3::zeros();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let p = Vector3::new(
                    rng.random_range(-40.0..40.0),
                    rng.random_range(-30.0..30.0),
                    rng.random_range(80.0..160.0),
                );
                (project(&k, &ident, &zero, &p), project(&k, r, t, &p))
            })
            .collect()
    }

    #[test]
    fn noiseless_projections_all_inliers() {
        let r = rot_y(1.0) * rot_x(0.5);
        let t = Vector3::new(8.0, 0.3, 0.15);
        let pairs = synthetic_pairs(50, &r, &t, 31);
        let (f, inliers) = estimate_fundamental(&pairs, 1.0, 2000, 7).unwrap();
        assert_eq!(inliers.len(), 50);
        let max_err = pairs
            .iter()
            .map(|p| sampson_distance(&f.0, p))
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-6, "max Sampson {max_err}");
        assert!((f.0.norm() - 1.0).abs() < 1e-12);
        assert!(f.0.determinant().abs() < 1e-9);
    }

    #[test]
    fn too_few_matches_rejected() {
        let pairs = vec![((0.0, 0.0), (1.0, 1.0)); 7];
        assert!(matches!(
            estimate_fundamental(&pairs, 1.0, 100, 1),
            Err(EpipolarError::TooFewMatches(7))
        ));
    }

    #[test]
    fn outliers_excluded_from_consensus() {
        let r = rot_y(0.8);
        let t = Vector3::new(10.0, 0.2, 0.0);
        let mut pairs = synthetic_pairs(40, &r, &t, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            pairs.push((
                (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
            ));
        }
        let (_, inliers) = estimate_fundamental(&pairs, 1.0, 2000, 11).unwrap();
        for i in 0..40 {
            assert!(inliers.contains(&i), "true pair {i} missing");
        }
    }

    #[test]
    fn seeded_estimation_is_deterministic() {
        let r = rot_y(0.8);
        let t = Vector3::new(10.0, 0.2, 0.0);
        let mut pairs = synthetic_pairs(30, &r, &t, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..15 {
            pairs.push((
                (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
            ));
        }
        let (fa, ia) = estimate_fundamental(&pairs, 1.0, 500, 42).unwrap();
        let (fb, ib) = estimate_fundamental(&pairs, 1.0, 500, 42).unwrap();
        assert_eq!(fa.0, fb.0);
        assert_eq!(ia, ib);
    }

    /// Pairs from a camera translating purely along +x at varying depth:
    /// already rectified, disparity varies with depth.
    fn translation_pairs(n: usize, seed: u64) -> Vec<PointPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x = rng.random_range(60.0..580.0);
                let y = rng.random_range(60.0..420.0);
                let z = rng.random_range(80.0..160.0);
                let d = 800.0 * 1.7 / z;
                ((x, y), (x - d, y))
            })
            .collect()
    }

    #[test]
    fn already_rectified_pair_maps_to_near_similarity() {
        let pairs = translation_pairs(60, 13);
        let (f, inlier_idx) = estimate_fundamental(&pairs, 1.0, 2000, 3).unwrap();
        assert_eq!(inlier_idx.len(), 60);
        let inliers: Vec<PointPair> = inlier_idx.iter().map(|&i| pairs[i]).collect();
        let rp = rectify(&f, &inliers, (640, 480)).unwrap();
        for hm in [&rp.h1, &rp.h2] {
            let h = hm / hm[(2, 2)];
            // Projective terms vanish; the linear block stays a scaled
            // rotation by 0 or 180 degrees up to the least-squares
            // alignment's finite-sample noise.
            assert!(h[(2, 0)].abs() < 1e-9 && h[(2, 1)].abs() < 1e-9, "{h}");
            assert!(h[(0, 1)].abs() < 0.01 && h[(1, 0)].abs() < 0.01, "{h}");
            assert!((h[(0, 0)].abs() - h[(1, 1)].abs()).abs() < 0.01, "{h}");
        }
        let map = |hm: &Matrix3<f64>, p: (f64, f64)| dehom(&(hm * hom(p)));
        let mut residual = 0.0f64;
        for pair in &inliers {
            let ya = map(&rp.h1, pair.0).1;
            let yb = map(&rp.h2, pair.1).1;
            residual = residual.max((ya - yb).abs());
        }
        assert!(residual < 0.1, "row residual {residual}");
        // Grid disparities map back to the original pair exactly.
        for pair in &inliers {
            let ga = map(&rp.h1, pair.0);
            let grid = ga.0 - map(&rp.h2, pair.1).0;
            assert!(grid >= DISPARITY_MARGIN - 1e-6);
            let orig = rp.original_disparity(ga.0, ga.1, grid);
            assert!((orig - (pair.0 .0 - pair.1 .0)).abs() < 1e-6);
        }
    }

    #[test]
    fn tilted_pair_rectifies_within_half_pixel() {
        let r = rot_y(2.0);
        let t = Vector3::new(10.0, 0.0, 0.0);
        let pairs = synthetic_pairs(60, &r, &t, 17);
        let (f, inlier_idx) = estimate_fundamental(&pairs, 1.0, 2000, 9).unwrap();
        let inliers: Vec<PointPair> = inlier_idx.iter().map(|&i| pairs[i]).collect();
        assert!(inliers.len() >= 50);
        let rp = rectify(&f, &inliers, (640, 480)).unwrap();
        let map = |hm: &Matrix3<f64>, p: (f64, f64)| dehom(&(hm * hom(p)));
        let mut residual = 0.0f64;
        for pair in &inliers {
            let ya = map(&rp.h1, pair.0).1;
            let yb = map(&rp.h2, pair.1).1;
            residual = residual.max((ya - yb).abs());
        }
        assert!(residual < 0.5, "row residual {residual}");
    }

    #[test]
    fn epipole_inside_image_rejected() {
        // Both epipoles at the image center by construction.
        let e = Vector3::new(320.0, 240.0, 1.0);
        let mut m = cross_matrix(&e);
        m /= m.norm();
        let f = FundamentalMatrix(m);
        let inliers = translation_pairs(10, 1);
        assert!(matches!(
            rectify(&f, &inliers, (640, 480)),
            Err(EpipolarError::EpipoleInsideImage(x, y))
                if (x - 320.0).abs() < 1e-6 && (y - 240.0).abs() < 1e-6
        ));
    }

    /// Smooth band-limited texture; bilinear resampling keeps it intact.
    fn smooth_texture(w: usize, h: usize) -> GrayRaster {
        let mut img = Raster::new(w, h, 0u8).unwrap();
        for y in 0..h {
            for x in 0..w {
                let xf = x as f64;
                let yf = y as f64;
                let v = 128.0
                    + 55.0 * (xf / 7.0).sin() * (yf / 9.0).sin()
                    + 40.0 * ((xf + yf) / 11.0).sin();
                img.set(x, y, v.round().clamp(0.0, 255.0) as u8);
            }
        }
        img
    }

    #[test]
    fn warp_identity_is_lossless() {
        let img = smooth_texture(64, 48);
        let out = warp(&img, &Matrix3::identity(), (64, 48)).unwrap();
        assert_eq!(out.image.values(), img.values());
        assert_eq!(out.valid.area(), 64 * 48);
    }

    #[test]
    fn warp_integer_translation_is_exact() {
        let img = smooth_texture(64, 48);
        let h = Matrix3::new(1.0, 0.0, 5.0, 0.0, 1.0, -3.0, 0.0, 0.0, 1.0);
        let out = warp(&img, &h, (64, 48)).unwrap();
        for y in 0..45 {
            for x in 5..64 {
                assert_eq!(out.image.get(x, y), img.get(x - 5, y + 3));
                assert!(out.valid.get(x, y));
            }
        }
        assert!(!out.valid.get(0, 0));
        assert_eq!(out.image.get(0, 0), 0);
    }

    #[test]
    fn warp_roundtrip_preserves_interior() {
        let img = smooth_texture(128, 128);
        let h = Matrix3::new(
            1.02, 0.01, 3.0, -0.008, 0.99, -2.0, 1e-5, -2e-5, 1.0,
        );
        let fwd = warp(&img, &h, (150, 150)).unwrap();
        let h_inv = h.try_inverse().unwrap();
        let back = warp(&fwd.image, &h_inv, (128, 128)).unwrap();
        let mut se = 0.0f64;
        let mut n = 0usize;
        for y in 10..118 {
            for x in 10..118 {
                if !back.valid.get(x, y) {
                    continue;
                }
                let d = back.image.get(x, y) as f64 - img.get(x, y) as f64;
                se += d * d;
                n += 1;
            }
        }
        assert!(n > 100 * 100);
        let mse = se / n as f64;
        let psnr = 10.0 * (255.0f64 * 255.0 / mse).log10();
        assert!(psnr > 40.0, "psnr {psnr:.2} dB");
    }

    #[test]
    fn warp_rejects_singular_homography() {
        let img = smooth_texture(32, 32);
        let h = Matrix3::new(1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            warp(&img, &h, (32, 32)),
            Err(EpipolarError::SingularHomography)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn estimated_matrix_keeps_invariants(
            seed in 0u64..500,
            yaw in -1.5f64..1.5,
            tx in 5.0f64..15.0,
        ) {
            let r = rot_y(yaw);
            let t = Vector3::new(tx, 0.2, 0.1);
            let pairs = synthetic_pairs(40, &r, &t, seed);
            let (f, inliers) = estimate_fundamental(&pairs, 1.0, 1000, seed).unwrap();
            prop_assert!(inliers.len() >= 8);
            prop_assert!((f.0.norm() - 1.0).abs() < 1e-12);
            prop_assert!(f.0.determinant().abs() < 1e-9);
            let s = f.0.svd(false, false);
            prop_assert!(s.singular_values[2] < 1e-12);
            for &i in &inliers {
                prop_assert!(sampson_distance(&f.0, &pairs[i]) <= 1.0);
            }
        }
    }
}
