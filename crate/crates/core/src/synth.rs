//! Synthetic scene generator: frame pairs with known geometry,
//! ground-truth disparity, and exact segmentation masks.
//!
//! Scenes are built from fronto-parallel planes, spheres, and planar
//! polygon leaves, ray-cast through the rig's pinhole model from camera
//! positions separated by the rig baseline along +x. Textures are
//! band-limited value noise anchored to world coordinates, so the two
//! frames are photo-consistent by construction and every pipeline stage
//! can be checked against the analytic geometry.

use crate::phenometrics::{
    leaf_area, leaf_length, sphere_volume, HeadGeometry, LeafGeometry, PhenoError, PlantRecord,
};
use crate::raster::{
    FloatRaster, Instance, MaskClass, Raster, RasterError, RgbRaster, SegmentationSet,
};
use crate::raster::BitMask;
use crate::stereo::CameraRig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Pheno(#[from] PhenoError),
    #[error("scene must be at least {1}x{1}, got {0}x{1}")]
    BadDims(usize, usize),
    #[error("{object}: depth range [{near:.1}, {far:.1}] outside ({min:.1}, {max:.1}]")]
    DepthOutOfRange {
        object: String,
        near: f64,
        far: f64,
        min: f64,
        max: f64,
    },
    #[error("leaf polygon needs at least 3 vertices, got {0}")]
    BadPolygon(usize),
    #[error("sphere radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("at most {0} objects per scene")]
    TooManyObjects(usize),
    #[error("not a cabbage scene: {0}")]
    NotCabbage(String),
}

/// Closest allowed object point to the camera, cm.
pub const MIN_DEPTH_CM: f64 = 10.0;
const MIN_SCENE_SIDE: usize = 32;
const MAX_OBJECTS: usize = 32;

/// Camera parameters as written in scene JSON; unset fields take the
/// rig defaults (principal point defaults to the image center).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigSpec {
    pub focal_px: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height_cm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_cm_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_stride: Option<u32>,
}

/// A renderable object. Coordinates are camera-frame cm: x right,
/// y down, z away from the camera at its first position.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SceneObject {
    /// Fronto-parallel infinite plane (the ground).
    Plane { depth_cm: f64, texture_seed: u32 },
    /// Cabbage head stand-in.
    Sphere {
        center_cm: [f64; 3],
        radius_cm: f64,
        texture_seed: u32,
    },
    /// Planar polygon leaf with ground-truth attachment and tip markers.
    Leaf {
        depth_cm: f64,
        polygon_cm: Vec<[f64; 2]>,
        attachment_cm: [f64; 3],
        tip_cm: [f64; 3],
        texture_seed: u32,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub rig: RigSpec,
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn from_json(bytes: &[u8]) -> Result<Self, SynthError> {
        let spec: SceneSpec = serde_json::from_slice(bytes)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<Vec<u8>, SynthError> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    /// The rig with defaults applied.
    pub fn rig(&self) -> CameraRig {
        let mut rig = CameraRig::new(
            self.rig.focal_px,
            self.rig.cx.unwrap_or((self.width as f64 - 1.0) / 2.0),
            self.rig.cy.unwrap_or((self.height as f64 - 1.0) / 2.0),
        );
        if let Some(h) = self.rig.height_cm {
            rig.height_cm = h;
        }
        if let Some(s) = self.rig.speed_cm_s {
            rig.speed_cm_s = s;
        }
        if let Some(f) = self.rig.fps {
            rig.fps = f;
        }
        if let Some(s) = self.rig.frame_stride {
            rig.frame_stride = s;
        }
        rig
    }

    /// Objects must sit below the camera's minimum working distance and
    /// at or above the ground plane (depth <= rig height).
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.width < MIN_SCENE_SIDE || self.height < MIN_SCENE_SIDE {
            return Err(SynthError::BadDims(self.width, self.height));
        }
        if self.objects.len() > MAX_OBJECTS {
            return Err(SynthError::TooManyObjects(MAX_OBJECTS));
        }
        let max = self.rig().height_cm;
        let check = |object: String, near: f64, far: f64| {
            if near <= MIN_DEPTH_CM || far > max {
                Err(SynthError::DepthOutOfRange {
                    object,
                    near,
                    far,
                    min: MIN_DEPTH_CM,
                    max,
                })
            } else {
                Ok(())
            }
        };
        for (i, obj) in self.objects.iter().enumerate() {
            match obj {
                SceneObject::Plane { depth_cm, .. } => {
                    check(format!("plane #{i}"), *depth_cm, *depth_cm)?;
                }
                SceneObject::Sphere {
                    center_cm,
                    radius_cm,
                    ..
                } => {
                    if *radius_cm <= 0.0 {
                        return Err(SynthError::BadRadius(*radius_cm));
                    }
                    check(
                        format!("sphere #{i}"),
                        center_cm[2] - radius_cm,
                        center_cm[2] + radius_cm,
                    )?;
                }
                SceneObject::Leaf {
                    depth_cm,
                    polygon_cm,
                    ..
                } => {
                    if polygon_cm.len() < 3 {
                        return Err(SynthError::BadPolygon(polygon_cm.len()));
                    }
                    check(format!("leaf #{i}"), *depth_cm, *depth_cm)?;
                }
            }
        }
        Ok(())
    }
}

/// Integer-lattice hash in [0, 1), the texture's only source of
/// randomness (no sequential RNG, so rendering order cannot matter).
fn hash01(ix: i64, iy: i64, seed: u32) -> f64 {
    let mut h = (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ ((seed as u64) << 32 | 0x1656_67B1_9E37_79F9);
    h ^= h >> 29;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 32;
    (h & 0xFF_FFFF) as f64 / 16_777_216.0
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// One octave of value noise over world cm at the given cell size.
fn value_noise(x: f64, y: f64, cell: f64, seed: u32) -> f64 {
    let gx = x / cell;
    let gy = y / cell;
    let ix = gx.floor();
    let iy = gy.floor();
    let fx = smoothstep(gx - ix);
    let fy = smoothstep(gy - iy);
    let (ix, iy) = (ix as i64, iy as i64);
    let v00 = hash01(ix, iy, seed);
    let v10 = hash01(ix + 1, iy, seed);
    let v01 = hash01(ix, iy + 1, seed);
    let v11 = hash01(ix + 1, iy + 1, seed);
    v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy
}

/// Band-limited texture value in [0, 1): three octaves sized for strong
/// local contrast at field-camera ground sampling.
fn texture(x: f64, y: f64, seed: u32) -> f64 {
    0.5 * value_noise(x, y, 3.0, seed)
        + 0.3 * value_noise(x, y, 1.1, seed ^ 0x5BD1_E995)
        + 0.2 * value_noise(x, y, 0.45, seed ^ 0x85EB_CA6B)
}

fn shade(base: [u8; 3], t: f64) -> [u8; 3] {
    let f = 0.35 + 1.3 * t;
    let mut out = [0u8; 3];
    for (o, b) in out.iter_mut().zip(base) {
        *o = (b as f64 * f).round().clamp(0.0, 255.0) as u8;
    }
    out
}

fn object_base(obj: &SceneObject) -> [u8; 3] {
    match obj {
        SceneObject::Plane { .. } => [105, 92, 70],
        SceneObject::Sphere { .. } => [70, 135, 75],
        SceneObject::Leaf { .. } => [95, 165, 90],
    }
}

fn object_seed(obj: &SceneObject) -> u32 {
    match obj {
        SceneObject::Plane { texture_seed, .. }
        | SceneObject::Sphere { texture_seed, .. }
        | SceneObject::Leaf { texture_seed, .. } => *texture_seed,
    }
}

fn point_in_polygon(px: f64, py: f64, poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = (poly[i][0], poly[i][1]);
        let (xj, yj) = (poly[j][0], poly[j][1]);
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Depth along the ray from camera (ox, 0, 0) with direction
/// ((u-cx)/f, (v-cy)/f, 1); None when the object is missed.
fn hit_depth(obj: &SceneObject, ox: f64, ax: f64, ay: f64) -> Option<f64> {
    match obj {
        SceneObject::Plane { depth_cm, .. } => Some(*depth_cm),
        SceneObject::Sphere {
            center_cm,
            radius_cm,
            ..
        } => {
            let oc = [ox - center_cm[0], -center_cm[1], -center_cm[2]];
            let a = ax * ax + ay * ay + 1.0;
            let b = 2.0 * (ax * oc[0] + ay * oc[1] + oc[2]);
            let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - radius_cm * radius_cm;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            (t > 0.0).then_some(t)
        }
        SceneObject::Leaf {
            depth_cm,
            polygon_cm,
            ..
        } => {
            let x = ox + ax * depth_cm;
            let y = ay * depth_cm;
            point_in_polygon(x, y, polygon_cm).then_some(*depth_cm)
        }
    }
}

/// One rendered frame: image, per-pixel depth of the closest surface,
/// and exact projected silhouette masks.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub image: RgbRaster,
    /// Depth in cm of the closest hit; NaN where no object covers the pixel.
    pub depth: FloatRaster,
    pub segmentation: SegmentationSet,
}

/// Render the scene from a camera displaced `cam_x_cm` along +x.
pub fn render_frame(
    spec: &SceneSpec,
    cam_x_cm: f64,
    frame_id: &str,
) -> Result<RenderedFrame, SynthError> {
    spec.validate()?;
    let rig = spec.rig();
    let (w, h) = (spec.width, spec.height);
    let f = rig.focal_px;
    let (cx, cy) = rig.principal;

    let mut color = vec![[0u8; 3]; w * h];
    let mut depth = vec![f32::NAN; w * h];
    // Bit i set iff object i's silhouette covers the pixel, regardless
    // of occlusion.
    let mut hits = vec![0u32; w * h];

    color
        .par_chunks_mut(w)
        .zip(depth.par_chunks_mut(w))
        .zip(hits.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, ((crow, drow), hrow))| {
            for x in 0..w {
                let ax = (x as f64 - cx) / f;
                let ay = (y as f64 - cy) / f;
                let mut best: Option<(f64, usize)> = None;
                for (i, obj) in spec.objects.iter().enumerate() {
                    if let Some(z) = hit_depth(obj, cam_x_cm, ax, ay) {
                        hrow[x] |= 1 << i;
                        if best.is_none_or(|(bz, _)| z < bz) {
                            best = Some((z, i));
                        }
                    }
                }
                if let Some((z, i)) = best {
                    let obj = &spec.objects[i];
                    let wx = cam_x_cm + ax * z;
                    let wy = ay * z;
                    let t = texture(wx, wy, object_seed(obj));
                    crow[x] = shade(object_base(obj), t);
                    drow[x] = z as f32;
                } else {
                    crow[x] = [28, 28, 33];
                }
            }
        });

    // Assemble masks: one plant instance spanning every head and leaf,
    // then per-object head/leaf instances. The ground plane stays
    // background.
    let mut plant = BitMask::new(w, h)?;
    let mut instances = Vec::new();
    let mut next_id = 2u32;
    for (i, obj) in spec.objects.iter().enumerate() {
        let class = match obj {
            SceneObject::Plane { .. } => continue,
            SceneObject::Sphere { .. } => MaskClass::Head,
            SceneObject::Leaf { .. } => MaskClass::Leaf,
        };
        let mut mask = BitMask::new(w, h)?;
        for (idx, bits) in hits.iter().enumerate() {
            if bits & (1 << i) != 0 {
                mask.set(idx % w, idx / w, true);
                plant.set(idx % w, idx / w, true);
            }
        }
        instances.push(Instance {
            class,
            id: next_id,
            score: 1.0,
            mask,
        });
        next_id += 1;
    }
    if plant.area() > 0 {
        instances.insert(
            0,
            Instance {
                class: MaskClass::Plant,
                id: 1,
                score: 1.0,
                mask: plant,
            },
        );
    }

    Ok(RenderedFrame {
        image: Raster::from_vec(w, h, color)?,
        depth: Raster::from_vec(w, h, depth)?,
        segmentation: SegmentationSet {
            frame_id: frame_id.to_string(),
            width: w,
            height: h,
            instances,
        },
    })
}

/// Ground-truth disparity between a frame at `cam_x_cm` and one a
/// baseline further along +x: focal * baseline / depth per pixel.
pub fn gt_disparity(spec: &SceneSpec, cam_x_cm: f64) -> Result<FloatRaster, SynthError> {
    let frame = render_frame(spec, cam_x_cm, "gt")?;
    let rig = spec.rig();
    let fb = rig.focal_px * rig.baseline_cm();
    Ok(frame.depth.map(|z| {
        if z.is_nan() {
            f32::NAN
        } else {
            (fb / z as f64) as f32
        }
    }))
}

/// The two frames of a stereo pair plus the ground truth tied to the
/// first frame.
#[derive(Debug, Clone)]
pub struct RenderedPair {
    pub frame_a: RgbRaster,
    pub frame_b: RgbRaster,
    pub gt_disparity: FloatRaster,
    pub gt_segmentation: SegmentationSet,
}

/// Render the pair: camera at 0 and at +baseline.
pub fn render_pair(spec: &SceneSpec) -> Result<RenderedPair, SynthError> {
    let rig = spec.rig();
    let a = render_frame(spec, 0.0, "a")?;
    let b = render_frame(spec, rig.baseline_cm(), "b")?;
    let fb = rig.focal_px * rig.baseline_cm();
    let gt = a.depth.map(|z| {
        if z.is_nan() {
            f32::NAN
        } else {
            (fb / z as f64) as f32
        }
    });
    Ok(RenderedPair {
        frame_a: a.image,
        frame_b: b.image,
        gt_disparity: gt,
        gt_segmentation: a.segmentation,
    })
}

/// Instance id the renderer assigns to leaf number `leaf_index` in a
/// single-sphere scene (plant=1, head=2, leaves follow in spec order).
pub fn leaf_instance_id(spec: &SceneSpec, leaf_index: usize) -> u32 {
    let mut id = 2;
    let mut seen = 0usize;
    for obj in &spec.objects {
        match obj {
            SceneObject::Plane { .. } => continue,
            SceneObject::Sphere { .. } => id += 1,
            SceneObject::Leaf { .. } => {
                if seen == leaf_index {
                    return id;
                }
                seen += 1;
                id += 1;
            }
        }
    }
    id
}

/// Analytic plant record for a cabbage scene: exactly one sphere head
/// plus any number of leaves.
pub fn scene_truth(spec: &SceneSpec) -> Result<PlantRecord, SynthError> {
    spec.validate()?;
    let rig = spec.rig();
    let spheres: Vec<(&[f64; 3], f64)> = spec
        .objects
        .iter()
        .filter_map(|o| match o {
            SceneObject::Sphere {
                center_cm,
                radius_cm,
                ..
            } => Some((center_cm, *radius_cm)),
            _ => None,
        })
        .collect();
    if spheres.len() != 1 {
        return Err(SynthError::NotCabbage(format!(
            "need exactly one sphere head, got {}",
            spheres.len()
        )));
    }
    let (center, r) = spheres[0];
    let cz = center[2];
    let f = rig.focal_px;
    let radius_px = f * r / cz;
    let head = HeadGeometry {
        centroid_px: (
            f * center[0] / cz + rig.principal.0,
            f * center[1] / cz + rig.principal.1,
        ),
        area_px: (std::f64::consts::PI * radius_px * radius_px).round() as usize,
        radius_px,
        top_depth_cm: cz - r,
        equator_depth_cm: cz,
        radius_cm: r,
        diameter_cm: 2.0 * r,
        volume_cm3: sphere_volume(r)?,
    };

    let markers: Vec<([f64; 3], [f64; 3])> = spec
        .objects
        .iter()
        .filter_map(|o| match o {
            SceneObject::Leaf {
                attachment_cm,
                tip_cm,
                ..
            } => Some((*attachment_cm, *tip_cm)),
            _ => None,
        })
        .collect();
    let lengths: Vec<f64> = markers
        .iter()
        .map(|(p, q)| leaf_length((p[0], p[1], p[2]), (q[0], q[1], q[2])))
        .collect();
    let mut leaves = Vec::new();
    let mut total_cm2 = 0.0;
    for (i, ((p, q), len)) in markers.iter().zip(&lengths).enumerate() {
        let area = leaf_area(&lengths, *len, 8.3)?;
        total_cm2 += area;
        leaves.push(LeafGeometry {
            instance_id: leaf_instance_id(spec, i),
            attachment_cm: *p,
            tip_cm: *q,
            length_cm: *len,
            area_cm2: area,
        });
    }

    Ok(PlantRecord {
        plant_id: 1,
        head,
        leaves,
        total_leaf_area_m2: total_cm2 / 1e4,
        leaf_area_correction: 1.0,
        depth_fallback: false,
        leaves_skipped: Vec::new(),
    })
}
