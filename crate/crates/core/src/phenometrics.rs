//! Per-plant phenotypes from masks and a metric depth map: head diameter
//! and volume, leaf assignment, leaf length, leaf area, plus the
//! field-reference procedures (circumference tape, known-size marker).
//!
//! The head is modeled as a sphere. Its cross-section radius in pixels and
//! the camera distance to its equator jointly determine the metric radius;
//! since each depends on the other, the closed-form fixed point
//! `r_cm = r_px * Z_top / (focal_px - r_px)` is used.

use crate::raster::{BitMask, FloatRaster, RasterError};
use crate::stereo::CameraRig;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhenoError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("head mask is empty")]
    EmptyHead,
    #[error("only {valid} of {total} head pixels have depth, need {required}")]
    InsufficientDepth {
        valid: usize,
        total: usize,
        required: usize,
    },
    #[error("camera distance must be positive, got {0}")]
    NonpositiveDistance(f64),
    #[error("head radius {r_px} px reaches the focal length {focal_px} px, geometry impossible")]
    HeadFillsView { r_px: f64, focal_px: f64 },
    #[error("radius must be non-negative, got {0}")]
    NegativeRadius(f64),
    #[error("circumference must be non-negative, got {0}")]
    NegativeCircumference(f64),
    #[error("leaf length list is empty")]
    EmptyLengths,
    #[error("reference object has zero pixels")]
    ZeroReferencePixels,
    #[error("leaf {0} has no valid depth pixel")]
    NoValidLeafDepth(u32),
}

/// Tunables of the phenotype stage. Defaults reflect the field protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct PhenoParams {
    /// Slope applied to leaf length in the leaf-area regression.
    pub leaf_area_coeff: f64,
    /// Minimum fraction of head pixels that must carry valid depth.
    pub min_depth_fraction: f64,
    /// Depth percentile taken as the head's top surface (speckle robust).
    pub top_percentile: f64,
    /// Fallback: assume the head top sits this far above the ground plane
    /// when the depth map has no coverage.
    pub canopy_offset_cm: f64,
    /// Multiplier for occluded-leaf compensation. 1.0 = report visible only.
    pub leaf_area_correction: f64,
}

impl Default for PhenoParams {
    fn default() -> Self {
        Self {
            leaf_area_coeff: 8.3,
            min_depth_fraction: 0.2,
            top_percentile: 0.05,
            canopy_offset_cm: 10.0,
            leaf_area_correction: 1.0,
        }
    }
}

/// Circle-equivalent radius of a segmented cross-section.
pub fn head_radius_px(head_mask: &BitMask) -> Result<f64, PhenoError> {
    let area = head_mask.area();
    if area == 0 {
        return Err(PhenoError::EmptyHead);
    }
    Ok((area as f64 / std::f64::consts::PI).sqrt())
}

/// Nearest-rank percentile of an unsorted sample, `p` in (0, 1].
fn percentile_nearest_rank(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("depths are finite"));
    let n = values.len();
    let rank = (p * n as f64).ceil() as usize;
    values[rank.clamp(1, n) - 1]
}

/// Camera distance to the head's top surface: a low percentile of the
/// valid depths over the head mask. Requires coverage of at least
/// `min_fraction` of the mask.
pub fn head_top_depth(
    head_mask: &BitMask,
    depth: &FloatRaster,
    top_percentile: f64,
    min_fraction: f64,
) -> Result<f64, PhenoError> {
    let total = head_mask.area();
    if total == 0 {
        return Err(PhenoError::EmptyHead);
    }
    let mut depths: Vec<f64> = head_mask
        .iter_set()
        .map(|(x, y)| depth.get(x, y))
        .filter(|z| !z.is_nan())
        .map(|z| z as f64)
        .collect();
    let required = (min_fraction * total as f64).ceil() as usize;
    if depths.len() < required.max(1) {
        return Err(PhenoError::InsufficientDepth {
            valid: depths.len(),
            total,
            required: required.max(1),
        });
    }
    Ok(percentile_nearest_rank(&mut depths, top_percentile))
}

/// Camera distance to the sphere equator: one radius below the top.
pub fn equator_depth(
    head_mask: &BitMask,
    depth: &FloatRaster,
    radius_cm_estimate: f64,
    params: &PhenoParams,
) -> Result<f64, PhenoError> {
    let z_top = head_top_depth(
        head_mask,
        depth,
        params.top_percentile,
        params.min_depth_fraction,
    )?;
    Ok(z_top + radius_cm_estimate)
}

/// Ground-sample conversion: a length of `r_px` pixels seen at camera
/// distance `h_cm` spans `r_px * h_cm / focal_px` centimetres.
pub fn px_to_cm(r_px: f64, h_cm: f64, rig: &CameraRig) -> Result<f64, PhenoError> {
    if h_cm <= 0.0 {
        return Err(PhenoError::NonpositiveDistance(h_cm));
    }
    Ok(r_px * rig.k * h_cm)
}

/// Metric head radius from its pixel radius and top depth. Closed form of
/// the fixed point r_cm = px_to_cm(r_px, z_top + r_cm).
pub fn head_radius_cm(r_px: f64, z_top_cm: f64, rig: &CameraRig) -> Result<f64, PhenoError> {
    if z_top_cm <= 0.0 {
        return Err(PhenoError::NonpositiveDistance(z_top_cm));
    }
    if r_px >= rig.focal_px {
        return Err(PhenoError::HeadFillsView {
            r_px,
            focal_px: rig.focal_px,
        });
    }
    Ok(r_px * z_top_cm / (rig.focal_px - r_px))
}

/// Volume of a sphere.
pub fn sphere_volume(radius_cm: f64) -> Result<f64, PhenoError> {
    if radius_cm < 0.0 {
        return Err(PhenoError::NegativeRadius(radius_cm));
    }
    Ok(4.0 / 3.0 * std::f64::consts::PI * radius_cm.powi(3))
}

/// Sphere volume from a tape-measured circumference.
pub fn gt_volume_from_circumference(c_cm: f64) -> Result<f64, PhenoError> {
    if c_cm < 0.0 {
        return Err(PhenoError::NegativeCircumference(c_cm));
    }
    sphere_volume(c_cm / (2.0 * std::f64::consts::PI))
}

/// Planar area from pixel counts against a reference object of known size
/// lying in the same plane.
pub fn gt_area_from_reference(
    object_px: usize,
    ref_px: usize,
    ref_cm2: f64,
) -> Result<f64, PhenoError> {
    if ref_px == 0 {
        return Err(PhenoError::ZeroReferencePixels);
    }
    Ok(object_px as f64 * ref_cm2 / ref_px as f64)
}

/// Result of assigning leaves to one plant mask.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LeafAssignment {
    /// Indices of leaves with strictly more than half their area inside.
    pub assigned: Vec<usize>,
    /// Indices of empty leaf masks, skipped rather than failed.
    pub skipped_empty: Vec<usize>,
}

/// Assign each leaf to the plant when more than 50% of the leaf's pixels
/// fall inside the plant mask (strict).
pub fn assign_leaves(plant: &BitMask, leaves: &[BitMask]) -> Result<LeafAssignment, PhenoError> {
    let mut out = LeafAssignment::default();
    for (i, leaf) in leaves.iter().enumerate() {
        let area = leaf.area();
        if area == 0 {
            out.skipped_empty.push(i);
            continue;
        }
        let inside = plant.intersection_area(leaf)?;
        if 2 * inside > area {
            out.assigned.push(i);
        }
    }
    Ok(out)
}

/// Multi-plant assignment: a leaf goes to the plant holding the largest
/// fraction of it, provided that fraction exceeds 1/2; ties take the lower
/// plant index. Returns one `Option<plant index>` per leaf.
pub fn assign_leaves_multi(
    plants: &[&BitMask],
    leaves: &[BitMask],
) -> Result<Vec<Option<usize>>, PhenoError> {
    let mut out = vec![None; leaves.len()];
    for (li, leaf) in leaves.iter().enumerate() {
        let area = leaf.area();
        if area == 0 {
            continue;
        }
        let mut best: Option<(usize, usize)> = None;
        for (pi, plant) in plants.iter().enumerate() {
            let inside = plant.intersection_area(leaf)?;
            if 2 * inside > area {
                let better = match best {
                    None => true,
                    Some((_, b)) => inside > b,
                };
                if better {
                    best = Some((pi, inside));
                }
            }
        }
        out[li] = best.map(|(pi, _)| pi);
    }
    Ok(out)
}

/// Head measurements in both pixel and metric units.
#[derive(Debug, Clone, Serialize)]
pub struct HeadGeometry {
    pub centroid_px: (f64, f64),
    pub area_px: usize,
    pub radius_px: f64,
    /// Camera distance to the top of the head, cm.
    pub top_depth_cm: f64,
    /// Camera distance to the sphere equator, cm.
    pub equator_depth_cm: f64,
    pub radius_cm: f64,
    pub diameter_cm: f64,
    pub volume_cm3: f64,
}

/// Full head solve: pixel radius, top depth, metric radius fixed point,
/// volume. `fallback_top_depth` supplies Z_top when depth coverage is
/// insufficient; pass `None` to propagate the error instead.
pub fn head_geometry(
    head_mask: &BitMask,
    depth: &FloatRaster,
    rig: &CameraRig,
    params: &PhenoParams,
    fallback_top_depth: Option<f64>,
) -> Result<(HeadGeometry, bool), PhenoError> {
    let radius_px = head_radius_px(head_mask)?;
    let centroid_px = head_mask.centroid()?;
    let (z_top, used_fallback) = match head_top_depth(
        head_mask,
        depth,
        params.top_percentile,
        params.min_depth_fraction,
    ) {
        Ok(z) => (z, false),
        Err(e @ PhenoError::InsufficientDepth { .. }) => match fallback_top_depth {
            Some(z) => (z, true),
            None => return Err(e),
        },
        Err(e) => return Err(e),
    };
    let radius_cm = head_radius_cm(radius_px, z_top, rig)?;
    let volume_cm3 = sphere_volume(radius_cm)?;
    Ok((
        HeadGeometry {
            centroid_px,
            area_px: head_mask.area(),
            radius_px,
            top_depth_cm: z_top,
            equator_depth_cm: z_top + radius_cm,
            radius_cm,
            diameter_cm: 2.0 * radius_cm,
            volume_cm3,
        },
        used_fallback,
    ))
}

/// A point in camera coordinates, cm.
pub type PointCm = (f64, f64, f64);

fn px_point_to_cm(x_px: f64, y_px: f64, z_cm: f64, rig: &CameraRig) -> PointCm {
    let (cx, cy) = rig.principal;
    ((x_px - cx) * rig.k * z_cm, (y_px - cy) * rig.k * z_cm, z_cm)
}

/// Leaf base point: under the head center, one diameter below the top
/// surface (the sphere's bottom pole).
pub fn leaf_attachment(head: &HeadGeometry, rig: &CameraRig) -> PointCm {
    let z = head.top_depth_cm + 2.0 * head.radius_cm;
    px_point_to_cm(head.centroid_px.0, head.centroid_px.1, z, rig)
}

/// Leaf end point: the leaf pixel planar-farthest from the head center
/// (ties: lowest row-major index), at the leaf's minimum camera distance
/// (its highest point, robust to blade undulation).
pub fn leaf_tip(
    leaf_mask: &BitMask,
    leaf_id: u32,
    head_centroid_px: (f64, f64),
    depth: &FloatRaster,
    rig: &CameraRig,
) -> Result<PointCm, PhenoError> {
    let mut far: Option<(f64, usize, usize)> = None;
    let mut z_min = f64::INFINITY;
    for (x, y) in leaf_mask.iter_set() {
        let dx = x as f64 - head_centroid_px.0;
        let dy = y as f64 - head_centroid_px.1;
        let d2 = dx * dx + dy * dy;
        let farther = match far {
            None => true,
            Some((best, _, _)) => d2 > best,
        };
        if farther {
            far = Some((d2, x, y));
        }
        let z = depth.get(x, y);
        if !z.is_nan() {
            z_min = z_min.min(z as f64);
        }
    }
    let (_, qx, qy) = far.ok_or(PhenoError::NoValidLeafDepth(leaf_id))?;
    if !z_min.is_finite() {
        return Err(PhenoError::NoValidLeafDepth(leaf_id));
    }
    Ok(px_point_to_cm(qx as f64, qy as f64, z_min, rig))
}

/// Euclidean distance between attachment and tip.
pub fn leaf_length(p: PointCm, q: PointCm) -> f64 {
    let (dx, dy, dz) = (q.0 - p.0, q.1 - p.1, q.2 - p.2);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Single-leaf area from the plant's length population: half the mean
/// length plus `coeff` times this leaf's length.
pub fn leaf_area(all_lengths: &[f64], length_cm: f64, coeff: f64) -> Result<f64, PhenoError> {
    if all_lengths.is_empty() {
        return Err(PhenoError::EmptyLengths);
    }
    let mean = all_lengths.iter().sum::<f64>() / all_lengths.len() as f64;
    Ok(mean / 2.0 + coeff * length_cm)
}

/// Per-leaf detail retained in the plant record.
#[derive(Debug, Clone, Serialize)]
pub struct LeafGeometry {
    pub instance_id: u32,
    /// Attachment point p, camera cm.
    pub attachment_cm: [f64; 3],
    /// Tip point q, camera cm.
    pub tip_cm: [f64; 3],
    pub length_cm: f64,
    pub area_cm2: f64,
}

/// Everything reported for one plant.
#[derive(Debug, Clone, Serialize)]
pub struct PlantRecord {
    pub plant_id: u32,
    pub head: HeadGeometry,
    pub leaves: Vec<LeafGeometry>,
    pub total_leaf_area_m2: f64,
    /// Occlusion compensation applied to the total (1.0 = none).
    pub leaf_area_correction: f64,
    /// True when the head depth fell back to the rig-height estimate.
    pub depth_fallback: bool,
    /// Leaf instance ids dropped for lack of valid depth.
    pub leaves_skipped: Vec<u32>,
}

/// Assemble the record for one plant: solve the head, assign leaves, chain
/// tip/length/area per leaf, total in m². Leaves without valid depth are
/// recorded as skipped, not fatal.
pub fn plant_record(
    plant_id: u32,
    plant_mask: &BitMask,
    head_mask: &BitMask,
    leaves: &[(u32, &BitMask)],
    depth: &FloatRaster,
    rig: &CameraRig,
    params: &PhenoParams,
) -> Result<PlantRecord, PhenoError> {
    let fallback = Some(rig.height_cm - params.canopy_offset_cm);
    let (head, depth_fallback) = head_geometry(head_mask, depth, rig, params, fallback)?;
    let masks: Vec<BitMask> = leaves.iter().map(|(_, m)| (*m).clone()).collect();
    let assignment = assign_leaves(plant_mask, &masks)?;

    let p = leaf_attachment(&head, rig);
    let mut measured: Vec<(u32, PointCm, f64)> = Vec::new();
    let mut leaves_skipped: Vec<u32> = assignment
        .skipped_empty
        .iter()
        .map(|&i| leaves[i].0)
        .collect();
    for &i in &assignment.assigned {
        let (id, mask) = leaves[i];
        match leaf_tip(mask, id, head.centroid_px, depth, rig) {
            Ok(q) => measured.push((id, q, leaf_length(p, q))),
            Err(PhenoError::NoValidLeafDepth(_)) => leaves_skipped.push(id),
            Err(e) => return Err(e),
        }
    }

    let lengths: Vec<f64> = measured.iter().map(|(_, _, l)| *l).collect();
    let mut records = Vec::with_capacity(measured.len());
    let mut total_cm2 = 0.0;
    for (id, q, length) in &measured {
        let area = leaf_area(&lengths, *length, params.leaf_area_coeff)?;
        total_cm2 += area;
        records.push(LeafGeometry {
            instance_id: *id,
            attachment_cm: [p.0, p.1, p.2],
            tip_cm: [q.0, q.1, q.2],
            length_cm: *length,
            area_cm2: area,
        });
    }

    Ok(PlantRecord {
        plant_id,
        head,
        leaves: records,
        total_leaf_area_m2: params.leaf_area_correction * total_cm2 / 1e4,
        leaf_area_correction: params.leaf_area_correction,
        depth_fallback,
        leaves_skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;
    use proptest::prelude::*;

    fn rig_1000() -> CameraRig {
        CameraRig::new(1000.0, 0.0, 0.0)
    }

    fn mask_of(w: usize, h: usize, px: &[(usize, usize)]) -> BitMask {
        let mut m = BitMask::new(w, h).unwrap();
        for &(x, y) in px {
            m.set(x, y, true);
        }
        m
    }

    fn disk(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> BitMask {
        let mut m = BitMask::new(w, h).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= r * r {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    #[test]
    fn radius_px_from_area() {
        // ~7854 px disk: circle-equivalent radius recovers 50.
        let m = disk(128, 128, 63.5, 63.5, 50.0);
        let r = head_radius_px(&m).unwrap();
        assert!((r - 50.0).abs() < 0.1, "r = {r}");

        let single = mask_of(4, 4, &[(1, 1)]);
        let r1 = head_radius_px(&single).unwrap();
        assert!((r1 - 1.0 / std::f64::consts::PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn radius_px_quadruple_area_doubles() {
        // Two squares: 16 px and 64 px.
        let mut a = BitMask::new(16, 16).unwrap();
        let mut b = BitMask::new(16, 16).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                a.set(x, y, true);
            }
        }
        for y in 0..8 {
            for x in 0..8 {
                b.set(x, y, true);
            }
        }
        let ra = head_radius_px(&a).unwrap();
        let rb = head_radius_px(&b).unwrap();
        assert!((rb - 2.0 * ra).abs() < 1e-12);
    }

    #[test]
    fn radius_px_empty_mask_errors() {
        let m = BitMask::new(4, 4).unwrap();
        assert!(matches!(head_radius_px(&m), Err(PhenoError::EmptyHead)));
    }

    #[test]
    fn equator_depth_constant_field() {
        let m = disk(64, 64, 31.5, 31.5, 20.0);
        let depth = Raster::new(64, 64, 82.0f32).unwrap();
        let h = equator_depth(&m, &depth, 8.0, &PhenoParams::default()).unwrap();
        assert!((h - 90.0).abs() < 1e-6);
        let h0 = equator_depth(&m, &depth, 0.0, &PhenoParams::default()).unwrap();
        assert!((h0 - 82.0).abs() < 1e-6);
    }

    #[test]
    fn equator_depth_requires_coverage() {
        let m = disk(64, 64, 31.5, 31.5, 20.0);
        let mut depth = Raster::new(64, 64, f32::NAN).unwrap();
        // Valid depth on ~5% of the mask only.
        let need = m.area() / 20;
        for (i, (x, y)) in m.iter_set().enumerate() {
            if i >= need {
                break;
            }
            depth.set(x, y, 82.0);
        }
        assert!(matches!(
            equator_depth(&m, &depth, 8.0, &PhenoParams::default()),
            Err(PhenoError::InsufficientDepth { .. })
        ));
    }

    #[test]
    fn top_depth_percentile_rejects_speckle() {
        // 100 depths at 82 with 3 near-zero outliers: 5th percentile holds.
        let m = mask_of(16, 16, &(0..100).map(|i| (i % 16, i / 16)).collect::<Vec<_>>());
        let mut depth = Raster::new(16, 16, 82.0f32).unwrap();
        depth.set(0, 0, 1.0);
        depth.set(1, 0, 2.0);
        depth.set(2, 0, 3.0);
        let z = head_top_depth(&m, &depth, 0.05, 0.2).unwrap();
        assert!((z - 82.0).abs() < 1e-6, "z = {z}");
    }

    #[test]
    fn px_to_cm_examples() {
        let rig = rig_1000();
        assert_eq!(px_to_cm(0.0, 90.0, &rig).unwrap(), 0.0);
        assert!((px_to_cm(100.0, 90.0, &rig).unwrap() - 9.0).abs() < 1e-12);
        assert!((px_to_cm(100.0, 45.0, &rig).unwrap() - 4.5).abs() < 1e-12);
        assert!(px_to_cm(10.0, 0.0, &rig).is_err());
    }

    #[test]
    fn head_radius_cm_fixed_point_consistency() {
        let rig = rig_1000();
        let r = head_radius_cm(89.25, 82.0, &rig).unwrap();
        let h = 82.0 + r;
        let direct = px_to_cm(89.25, h, &rig).unwrap();
        assert!((r - direct).abs() < 1e-9, "r={r} direct={direct}");
    }

    #[test]
    fn head_radius_cm_rejects_degenerate() {
        let rig = rig_1000();
        assert!(matches!(
            head_radius_cm(1000.0, 82.0, &rig),
            Err(PhenoError::HeadFillsView { .. })
        ));
        assert!(head_radius_cm(50.0, -1.0, &rig).is_err());
    }

    #[test]
    fn sphere_volume_examples() {
        assert_eq!(sphere_volume(0.0).unwrap(), 0.0);
        assert!((sphere_volume(1.0).unwrap() - 4.18879020478639).abs() < 1e-9);
        // Radius 7.75 cm (diameter 15.5): 1949.8 cm3.
        assert!((sphere_volume(7.75).unwrap() - 1949.8).abs() < 0.05);
        assert!(sphere_volume(-1.0).is_err());
    }

    #[test]
    fn sphere_volume_doubling_is_exactly_eightfold() {
        for r in [0.5f64, 1.0, 7.75, 13.2] {
            assert_eq!(sphere_volume(2.0 * r).unwrap(), 8.0 * sphere_volume(r).unwrap());
        }
    }

    #[test]
    fn volume_from_circumference() {
        let v = gt_volume_from_circumference(2.0 * std::f64::consts::PI).unwrap();
        assert!((v - 4.18879020478639).abs() < 1e-9);
        assert_eq!(gt_volume_from_circumference(0.0).unwrap(), 0.0);
        assert!((gt_volume_from_circumference(48.0).unwrap() - 1867.552).abs() < 0.01);
        assert!(gt_volume_from_circumference(-1.0).is_err());
    }

    #[test]
    fn area_from_reference_object() {
        assert_eq!(gt_area_from_reference(100, 100, 4.0).unwrap(), 4.0);
        assert_eq!(gt_area_from_reference(0, 100, 4.0).unwrap(), 0.0);
        assert_eq!(gt_area_from_reference(2500, 100, 4.0).unwrap(), 100.0);
        assert!(gt_area_from_reference(10, 0, 4.0).is_err());
    }

    #[test]
    fn leaf_assignment_boundaries() {
        let plant = mask_of(8, 8, &(0..16).map(|i| (i % 4, i / 4)).collect::<Vec<_>>());
        // Fully inside; exactly half; 6 of 10 inside.
        let inside = mask_of(8, 8, &[(0, 0), (1, 0)]);
        let half = mask_of(8, 8, &[(0, 0), (4, 0)]);
        let six_of_ten = mask_of(
            8,
            8,
            &[
                (0, 0), (1, 0), (2, 0), (3, 0), (0, 1), (1, 1),
                (4, 0), (5, 0), (6, 0), (7, 0),
            ],
        );
        let a = assign_leaves(&plant, &[inside, half, six_of_ten]).unwrap();
        assert_eq!(a.assigned, vec![0, 2]);
        assert!(a.skipped_empty.is_empty());
    }

    #[test]
    fn leaf_assignment_skips_empty() {
        let plant = mask_of(4, 4, &[(0, 0)]);
        let empty = BitMask::new(4, 4).unwrap();
        let a = assign_leaves(&plant, &[empty]).unwrap();
        assert!(a.assigned.is_empty());
        assert_eq!(a.skipped_empty, vec![0]);
    }

    #[test]
    fn multi_plant_assignment_prefers_larger_overlap() {
        // Leaf of 10 px: 6 in plant A, 4 in plant B -> A.
        let leaf = mask_of(16, 4, &(0..10).map(|i| (i, 0)).collect::<Vec<_>>());
        let plant_a = mask_of(16, 4, &(0..6).map(|i| (i, 0)).collect::<Vec<_>>());
        let plant_b = mask_of(16, 4, &(6..10).map(|i| (i, 0)).collect::<Vec<_>>());
        let got = assign_leaves_multi(&[&plant_a, &plant_b], std::slice::from_ref(&leaf)).unwrap();
        assert_eq!(got, vec![Some(0)]);
        // Neither plant exceeds half: unassigned.
        let plant_c = mask_of(16, 4, &(0..5).map(|i| (i, 0)).collect::<Vec<_>>());
        let plant_d = mask_of(16, 4, &(5..10).map(|i| (i, 0)).collect::<Vec<_>>());
        let got = assign_leaves_multi(&[&plant_c, &plant_d], std::slice::from_ref(&leaf)).unwrap();
        assert_eq!(got, vec![None]);
    }

    #[test]
    fn non_overlapping_plants_claim_each_leaf_at_most_once() {
        let leaf = mask_of(16, 4, &(0..8).map(|i| (i, 1)).collect::<Vec<_>>());
        let plant_a = mask_of(
            16,
            4,
            &(0..16)
                .flat_map(|x| (0..4).map(move |y| (x, y)))
                .filter(|&(x, _)| x < 8)
                .collect::<Vec<_>>(),
        );
        let plant_b = mask_of(
            16,
            4,
            &(0..16)
                .flat_map(|x| (0..4).map(move |y| (x, y)))
                .filter(|&(x, _)| x >= 8)
                .collect::<Vec<_>>(),
        );
        let got = assign_leaves_multi(&[&plant_a, &plant_b], std::slice::from_ref(&leaf)).unwrap();
        let claimed = got.iter().flatten().count();
        assert!(claimed <= 1);
        assert_eq!(got, vec![Some(0)]);
    }

    #[test]
    fn attachment_point_geometry() {
        let rig = rig_1000();
        let head = HeadGeometry {
            centroid_px: (0.0, 0.0),
            area_px: 1,
            radius_px: 1.0,
            top_depth_cm: 82.0,
            equator_depth_cm: 90.0,
            radius_cm: 8.0,
            diameter_cm: 16.0,
            volume_cm3: 0.0,
        };
        let p = leaf_attachment(&head, &rig);
        assert_eq!(p, (0.0, 0.0, 98.0));

        let zero_r = HeadGeometry {
            radius_cm: 0.0,
            ..head.clone()
        };
        let p0 = leaf_attachment(&zero_r, &rig);
        assert_eq!(p0.2, 82.0);
    }

    #[test]
    fn attachment_translates_with_centroid() {
        let rig = rig_1000();
        let mk = |cx: f64, cy: f64| HeadGeometry {
            centroid_px: (cx, cy),
            area_px: 1,
            radius_px: 1.0,
            top_depth_cm: 80.0,
            equator_depth_cm: 85.0,
            radius_cm: 5.0,
            diameter_cm: 10.0,
            volume_cm3: 0.0,
        };
        let p1 = leaf_attachment(&mk(10.0, 20.0), &rig);
        let p2 = leaf_attachment(&mk(15.0, 26.0), &rig);
        let z = 90.0;
        assert!((p2.0 - p1.0 - 5.0 * z / 1000.0).abs() < 1e-12);
        assert!((p2.1 - p1.1 - 6.0 * z / 1000.0).abs() < 1e-12);
    }

    #[test]
    fn tip_single_pixel() {
        let rig = rig_1000();
        let leaf = mask_of(16, 4, &[(10, 0)]);
        let mut depth = Raster::new(16, 4, f32::NAN).unwrap();
        depth.set(10, 0, 80.0);
        let q = leaf_tip(&leaf, 7, (0.0, 0.0), &depth, &rig).unwrap();
        assert!((q.0 - 0.8).abs() < 1e-9);
        assert_eq!(q.1, 0.0);
        assert_eq!(q.2, 80.0);
    }

    #[test]
    fn tip_takes_farthest_pixel_and_min_depth() {
        let rig = rig_1000();
        // L-shaped leaf; farthest from (0,0) is (0,20).
        let mut px: Vec<(usize, usize)> = (0..10).map(|i| (i, 0)).collect();
        px.extend((0..21).map(|j| (0, j)));
        let leaf = mask_of(32, 32, &px);
        let mut depth = Raster::new(32, 32, 85.0f32).unwrap();
        depth.set(5, 0, 79.0);
        let q = leaf_tip(&leaf, 1, (0.0, 0.0), &depth, &rig).unwrap();
        // Planar position from (0,20); z from the highest leaf point.
        assert_eq!(q.2, 79.0);
        assert_eq!(q.0, 0.0);
        assert!((q.1 - 20.0 * 79.0 / 1000.0).abs() < 1e-9);
    }

    #[test]
    fn tip_tie_takes_lowest_flat_index() {
        let rig = rig_1000();
        // (4,0) and (0,4) are equidistant from center (2,2) with (4,0)
        // first in row-major order.
        let leaf = mask_of(8, 8, &[(4, 0), (0, 4)]);
        let depth = Raster::new(8, 8, 80.0f32).unwrap();
        let q = leaf_tip(&leaf, 1, (2.0, 2.0), &depth, &rig).unwrap();
        assert!((q.0 - (4.0 - 0.0) * 0.08).abs() < 1e-9);
        assert!((q.1 - 0.0).abs() < 1e-9);
    }

    #[test]
    fn tip_without_depth_errors() {
        let rig = rig_1000();
        let leaf = mask_of(4, 4, &[(1, 1)]);
        let depth = Raster::new(4, 4, f32::NAN).unwrap();
        assert!(matches!(
            leaf_tip(&leaf, 9, (0.0, 0.0), &depth, &rig),
            Err(PhenoError::NoValidLeafDepth(9))
        ));
    }

    #[test]
    fn length_examples() {
        assert_eq!(leaf_length((1.0, 2.0, 3.0), (1.0, 2.0, 3.0)), 0.0);
        assert_eq!(leaf_length((0.0, 0.0, 0.0), (3.0, 4.0, 12.0)), 13.0);
        let p = (1.0, -2.0, 5.5);
        let q = (-3.0, 0.25, 9.0);
        assert_eq!(leaf_length(p, q), leaf_length(q, p));
    }

    #[test]
    fn leaf_area_regression() {
        assert_eq!(leaf_area(&[0.0], 0.0, 8.3).unwrap(), 0.0);
        assert!((leaf_area(&[50.0, 60.0, 40.0], 50.0, 8.3).unwrap() - 440.0).abs() < 1e-9);
        assert!((leaf_area(&[10.0], 10.0, 8.3).unwrap() - 88.0).abs() < 1e-9);
        assert!(matches!(
            leaf_area(&[], 1.0, 8.3),
            Err(PhenoError::EmptyLengths)
        ));
    }

    #[test]
    fn record_with_head_only() {
        let rig = rig_1000();
        let head = disk(128, 128, 63.5, 63.5, 40.0);
        let plant = disk(128, 128, 63.5, 63.5, 60.0);
        let depth = Raster::new(128, 128, 82.0f32).unwrap();
        let rec = plant_record(3, &plant, &head, &[], &depth, &rig, &PhenoParams::default())
            .unwrap();
        assert_eq!(rec.plant_id, 3);
        assert!(rec.leaves.is_empty());
        assert_eq!(rec.total_leaf_area_m2, 0.0);
        assert!(!rec.depth_fallback);
        assert!(rec.head.volume_cm3 > 0.0);
        assert!((rec.head.diameter_cm - 2.0 * rec.head.radius_cm).abs() < 1e-12);
    }

    #[test]
    fn record_uses_fallback_without_depth() {
        let rig = rig_1000();
        let head = disk(64, 64, 31.5, 31.5, 10.0);
        let plant = disk(64, 64, 31.5, 31.5, 20.0);
        let depth = Raster::new(64, 64, f32::NAN).unwrap();
        let rec = plant_record(1, &plant, &head, &[], &depth, &rig, &PhenoParams::default())
            .unwrap();
        assert!(rec.depth_fallback);
        assert!((rec.head.top_depth_cm - 80.0).abs() < 1e-9);
    }

    #[test]
    fn record_order_independent_for_disjoint_plants() {
        let rig = rig_1000();
        let params = PhenoParams::default();
        let depth = Raster::new(128, 128, 82.0f32).unwrap();
        let head_a = disk(128, 128, 30.0, 30.0, 12.0);
        let plant_a = disk(128, 128, 30.0, 30.0, 25.0);
        let head_b = disk(128, 128, 95.0, 95.0, 15.0);
        let plant_b = disk(128, 128, 95.0, 95.0, 28.0);
        let leaf_a = disk(128, 128, 30.0, 50.0, 4.0);
        let leaf_b = disk(128, 128, 95.0, 75.0, 4.0);
        let leaves: Vec<(u32, &BitMask)> = vec![(10, &leaf_a), (11, &leaf_b)];
        let ra1 = plant_record(1, &plant_a, &head_a, &leaves, &depth, &rig, &params).unwrap();
        let rb1 = plant_record(2, &plant_b, &head_b, &leaves, &depth, &rig, &params).unwrap();
        let rb2 = plant_record(2, &plant_b, &head_b, &leaves, &depth, &rig, &params).unwrap();
        let ra2 = plant_record(1, &plant_a, &head_a, &leaves, &depth, &rig, &params).unwrap();
        assert_eq!(ra1.head.volume_cm3, ra2.head.volume_cm3);
        assert_eq!(rb1.total_leaf_area_m2, rb2.total_leaf_area_m2);
        assert_eq!(ra1.leaves.len(), 1);
        assert_eq!(rb1.leaves.len(), 1);
        assert_eq!(ra1.leaves[0].instance_id, 10);
        assert_eq!(rb1.leaves[0].instance_id, 11);
    }

    proptest! {
        #[test]
        fn fixed_point_is_consistent(
            r_px in 1.0f64..400.0,
            z_top in 20.0f64..200.0,
            focal in 500.0f64..4000.0,
        ) {
            prop_assume!(focal > r_px + 1.0);
            let rig = CameraRig::new(focal, 0.0, 0.0);
            let r_cm = head_radius_cm(r_px, z_top, &rig).unwrap();
            let direct = px_to_cm(r_px, z_top + r_cm, &rig).unwrap();
            prop_assert!((r_cm - direct).abs() < 1e-9);
        }

        #[test]
        fn length_triangle_inequality(
            a in proptest::array::uniform3(-100.0f64..100.0),
            b in proptest::array::uniform3(-100.0f64..100.0),
            c in proptest::array::uniform3(-100.0f64..100.0),
        ) {
            let (pa, pb, pc) = (
                (a[0], a[1], a[2]),
                (b[0], b[1], b[2]),
                (c[0], c[1], c[2]),
            );
            prop_assert!(
                leaf_length(pa, pc) <= leaf_length(pa, pb) + leaf_length(pb, pc) + 1e-9
            );
        }

        #[test]
        fn volume_monotone_in_head_area(
            r1 in 3.0f64..20.0,
            grow in 0.0f64..15.0,
        ) {
            // Same constant depth field; a superset mask has larger area
            // and therefore no smaller volume.
            let rig = CameraRig::new(1000.0, 0.0, 0.0);
            let depth = Raster::new(96, 96, 82.0f32).unwrap();
            let small = disk(96, 96, 47.5, 47.5, r1);
            let big = disk(96, 96, 47.5, 47.5, r1 + grow);
            let params = PhenoParams::default();
            let (gs, _) = head_geometry(&small, &depth, &rig, &params, None).unwrap();
            let (gb, _) = head_geometry(&big, &depth, &rig, &params, None).unwrap();
            prop_assert!(gb.volume_cm3 >= gs.volume_cm3);
        }
    }
}
