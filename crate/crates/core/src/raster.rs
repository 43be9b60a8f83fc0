//! Image, mask and raster value types plus segmentation-set ingestion.
//!
//! Pixel coordinates refer to pixel centers; (0, 0) is the top-left pixel.
//! Disparity and depth rasters use `f32::NAN` as the invalid sentinel.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster dimensions must be positive, got {0}x{1}")]
    EmptyDims(usize, usize),
    #[error("value buffer holds {len} entries, expected {expected} ({width}x{height})")]
    LengthMismatch {
        len: usize,
        expected: usize,
        width: usize,
        height: usize,
    },
    #[error("RLE runs sum to {sum}, expected {expected} pixels")]
    RleSumMismatch { sum: u64, expected: u64 },
    #[error("segmentation JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("instance {id}: unknown class \"{class}\"")]
    UnknownClass { id: i64, class: String },
    #[error("instance {id}: {source}")]
    BadInstance {
        id: i64,
        #[source]
        source: Box<RasterError>,
    },
    #[error("duplicate instance id {0}")]
    DuplicateInstanceId(i64),
    #[error("segmentation is {found_w}x{found_h}, expected {want_w}x{want_h}")]
    SegmentationDims {
        found_w: usize,
        found_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
}

/// Row-major 2-D grid of pixel values.
///
/// `V` is a plain value: 8-bit luminance, an RGB triple, or `f32` for
/// disparity (px) and depth (cm) rasters.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<V> {
    width: usize,
    height: usize,
    data: Vec<V>,
}

pub type GrayRaster = Raster<u8>;
pub type RgbRaster = Raster<[u8; 3]>;
/// Disparity in pixels or depth in centimetres; NaN marks invalid pixels.
pub type FloatRaster = Raster<f32>;

impl<V: Copy> Raster<V> {
    pub fn new(width: usize, height: usize, fill: V) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyDims(width, height));
        }
        Ok(Self {
            width,
            height,
            data: vec![fill; width * height],
        })
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<V>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyDims(width, height));
        }
        if data.len() != width * height {
            return Err(RasterError::LengthMismatch {
                len: data.len(),
                expected: width * height,
                width,
                height,
            });
        }
        Ok(Self {
            width,
            height,
            data,
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

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> V {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: V) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = v;
    }

    pub fn values(&self) -> &[V] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [V] {
        &mut self.data
    }

    pub fn row(&self, y: usize) -> &[V] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn map<U: Copy, F: Fn(V) -> U>(&self, f: F) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Raster<[u8; 3]> {
    /// ITU-R 601 luma conversion.
    pub fn to_luma(&self) -> GrayRaster {
        self.map(|[r, g, b]| {
            let y = 0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32;
            y.round().clamp(0.0, 255.0) as u8
        })
    }
}

impl Raster<f32> {
    pub const INVALID: f32 = f32::NAN;

    #[inline]
    pub fn is_valid_at(&self, x: usize, y: usize) -> bool {
        !self.get(x, y).is_nan()
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| !v.is_nan()).count()
    }
}

/// Row-major packed boolean grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    width: usize,
    height: usize,
    words: Vec<u64>,
}

impl BitMask {
    pub fn new(width: usize, height: usize) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyDims(width, height));
        }
        let nbits = width * height;
        Ok(Self {
            width,
            height,
            words: vec![0; nbits.div_ceil(64)],
        })
    }

    /// Decode an uncompressed RLE run list (background first, runs alternate).
    pub fn from_runs(runs: &[u64], width: usize, height: usize) -> Result<Self, RasterError> {
        let mut mask = Self::new(width, height)?;
        let expected = (width * height) as u64;
        let sum: u64 = runs.iter().sum();
        if sum != expected {
            return Err(RasterError::RleSumMismatch { sum, expected });
        }
        let mut idx: usize = 0;
        for (i, &run) in runs.iter().enumerate() {
            let run = run as usize;
            if i % 2 == 1 {
                for bit in idx..idx + run {
                    mask.words[bit / 64] |= 1u64 << (bit % 64);
                }
            }
            idx += run;
        }
        Ok(mask)
    }

    /// Encode to the run list convention `from_runs` decodes.
    pub fn to_runs(&self) -> Vec<u64> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut count: u64 = 0;
        for i in 0..self.width * self.height {
            let bit = self.get_flat(i);
            if bit == current {
                count += 1;
            } else {
                runs.push(count);
                current = bit;
                count = 1;
            }
        }
        runs.push(count);
        runs
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    fn get_flat(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        debug_assert!(x < self.width && y < self.height);
        self.get_flat(y * self.width + x)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        debug_assert!(x < self.width && y < self.height);
        let i = y * self.width + x;
        if v {
            self.words[i / 64] |= 1u64 << (i % 64);
        } else {
            self.words[i / 64] &= !(1u64 << (i % 64));
        }
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Arithmetic mean of set-pixel coordinates.
    pub fn centroid(&self) -> Result<(f64, f64), RasterError> {
        let mut n = 0usize;
        let mut sx = 0u64;
        let mut sy = 0u64;
        for (x, y) in self.iter_set() {
            sx += x as u64;
            sy += y as u64;
            n += 1;
        }
        if n == 0 {
            return Err(RasterError::EmptyMask);
        }
        Ok((sx as f64 / n as f64, sy as f64 / n as f64))
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        (0..self.width * self.height)
            .filter(move |&i| self.get_flat(i))
            .map(move |i| (i % w, i / w))
    }

    fn check_dims(&self, other: &BitMask) -> Result<(), RasterError> {
        if self.dims() != other.dims() {
            return Err(RasterError::DimMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &BitMask) -> Result<usize, RasterError> {
        self.check_dims(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum())
    }

    pub fn union_area(&self, other: &BitMask) -> Result<usize, RasterError> {
        self.check_dims(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum())
    }

    pub fn union(&self, other: &BitMask) -> Result<BitMask, RasterError> {
        self.check_dims(other)?;
        let mut out = self.clone();
        for (w, o) in out.words.iter_mut().zip(&other.words) {
            *w |= o;
        }
        Ok(out)
    }
}

/// Decode an RLE run list into a mask. Alias for [`BitMask::from_runs`],
/// matching the pipeline vocabulary.
pub fn rasterize(runs: &[u64], dims: (usize, usize)) -> Result<BitMask, RasterError> {
    BitMask::from_runs(runs, dims.0, dims.1)
}

pub fn mask_area(mask: &BitMask) -> usize {
    mask.area()
}

pub fn mask_centroid(mask: &BitMask) -> Result<(f64, f64), RasterError> {
    mask.centroid()
}

/// The three instance classes emitted by the segmentation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskClass {
    Plant,
    Head,
    Leaf,
}

impl MaskClass {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskClass::Plant => "plant",
            MaskClass::Head => "head",
            MaskClass::Leaf => "leaf",
        }
    }

    pub fn parse(s: &str) -> Option<MaskClass> {
        match s {
            "plant" => Some(MaskClass::Plant),
            "head" => Some(MaskClass::Head),
            "leaf" => Some(MaskClass::Leaf),
            _ => None,
        }
    }
}

/// One segmented instance with its decoded mask.
#[derive(Debug, Clone)]
pub struct Instance {
    pub class: MaskClass,
    pub id: u32,
    /// Detection confidence; ground-truth files omit it (defaults to 1.0).
    pub score: f32,
    pub mask: BitMask,
}

/// Per-frame instance list. Masks of different classes may overlap freely.
#[derive(Debug, Clone)]
pub struct SegmentationSet {
    pub frame_id: String,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<Instance>,
}

impl SegmentationSet {
    pub fn instances_of(&self, class: MaskClass) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(move |i| i.class == class)
    }
}

#[derive(Serialize, Deserialize)]
struct RawSegmentation {
    frame_id: String,
    width: usize,
    height: usize,
    instances: Vec<RawInstance>,
}

#[derive(Serialize, Deserialize)]
struct RawInstance {
    class: String,
    id: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<f32>,
    rle: Vec<u64>,
}

/// Parse a segmentation JSON file.
///
/// `dims`, when given, must match the file's width/height (masks have to be
/// at the resolution of the frame they annotate).
pub fn parse_segmentation(
    bytes: &[u8],
    dims: Option<(usize, usize)>,
) -> Result<SegmentationSet, RasterError> {
    let raw: RawSegmentation = serde_json::from_slice(bytes)?;
    if let Some((w, h)) = dims {
        if raw.width != w || raw.height != h {
            return Err(RasterError::SegmentationDims {
                found_w: raw.width,
                found_h: raw.height,
                want_w: w,
                want_h: h,
            });
        }
    }
    let mut seen = std::collections::HashSet::new();
    let mut instances = Vec::with_capacity(raw.instances.len());
    for inst in raw.instances {
        let class = MaskClass::parse(&inst.class).ok_or(RasterError::UnknownClass {
            id: inst.id,
            class: inst.class.clone(),
        })?;
        if !seen.insert(inst.id) {
            return Err(RasterError::DuplicateInstanceId(inst.id));
        }
        let mask = BitMask::from_runs(&inst.rle, raw.width, raw.height).map_err(|e| {
            RasterError::BadInstance {
                id: inst.id,
                source: Box::new(e),
            }
        })?;
        instances.push(Instance {
            class,
            id: inst.id as u32,
            score: inst.score.unwrap_or(1.0),
            mask,
        });
    }
    Ok(SegmentationSet {
        frame_id: raw.frame_id,
        width: raw.width,
        height: raw.height,
        instances,
    })
}

/// Serialize a segmentation set back to the JSON interchange format.
pub fn segmentation_to_json(set: &SegmentationSet) -> String {
    let raw = RawSegmentation {
        frame_id: set.frame_id.clone(),
        width: set.width,
        height: set.height,
        instances: set
            .instances
            .iter()
            .map(|i| RawInstance {
                class: i.class.as_str().to_string(),
                id: i.id as i64,
                score: if (i.score - 1.0).abs() < f32::EPSILON {
                    None
                } else {
                    Some(i.score)
                },
                rle: i.mask.to_runs(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&raw).expect("segmentation serialization cannot fail")
}
