//! Image file codecs for the raster types.
//!
//! Color frames and masks travel as PNG, grayscale also as PGM.
//! Disparity and depth rasters are stored as 16-bit grayscale PNGs:
//! disparity values are `round(d * 256)`, depth values are whole
//! millimetres, and 0 marks an invalid pixel in both.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use thiserror::Error;

use crate::raster::{FloatRaster, GrayRaster, RasterError, RgbRaster};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("image is {0}x{1}, too large to encode")]
    TooLarge(usize, usize),
}

/// Disparity quantization step. One u16 count is 1/256 px.
pub const DISPARITY_SCALE: f64 = 256.0;
/// Depth is stored in whole millimetres; rasters carry centimetres.
pub const DEPTH_MM_PER_CM: f64 = 10.0;

fn encode_dims(w: usize, h: usize) -> Result<(u32, u32), IoError> {
    let wu = u32::try_from(w).map_err(|_| IoError::TooLarge(w, h))?;
    let hu = u32::try_from(h).map_err(|_| IoError::TooLarge(w, h))?;
    Ok((wu, hu))
}

pub fn load_color(path: &Path) -> Result<RgbRaster, IoError> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0).collect();
    Ok(RgbRaster::from_vec(w, h, data)?)
}

pub fn save_color(path: &Path, raster: &RgbRaster) -> Result<(), IoError> {
    let (w, h) = encode_dims(raster.width(), raster.height())?;
    let flat: Vec<u8> = raster.values().iter().flatten().copied().collect();
    let img: RgbImage = ImageBuffer::from_raw(w, h, flat).expect("sized from raster");
    img.save(path)?;
    Ok(())
}

pub fn load_gray(path: &Path) -> Result<GrayRaster, IoError> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(GrayRaster::from_vec(w, h, img.into_raw())?)
}

/// Format follows the extension; `.png` and `.pgm` are both supported.
pub fn save_gray(path: &Path, raster: &GrayRaster) -> Result<(), IoError> {
    let (w, h) = encode_dims(raster.width(), raster.height())?;
    let img: GrayImage =
        ImageBuffer::from_raw(w, h, raster.values().to_vec()).expect("sized from raster");
    img.save(path)?;
    Ok(())
}

fn save_u16(path: &Path, raster: &FloatRaster, to_u16: impl Fn(f32) -> u16) -> Result<(), IoError> {
    let (w, h) = encode_dims(raster.width(), raster.height())?;
    let data: Vec<u16> = raster.values().iter().map(|&v| to_u16(v)).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w, h, data).expect("sized from raster");
    img.save(path)?;
    Ok(())
}

fn load_u16(path: &Path, to_f32: impl Fn(u16) -> f32) -> Result<FloatRaster, IoError> {
    let img = image::open(path)?;
    let img = match img {
        DynamicImage::ImageLuma16(buf) => buf,
        other => other.to_luma16(),
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = img.into_raw().iter().map(|&v| to_f32(v)).collect();
    Ok(FloatRaster::from_vec(w, h, data)?)
}

/// Values land on a 1/256 px grid; anything that rounds to 0, is
/// negative, or is NaN encodes as the invalid sentinel 0. Disparities
/// past 255.996 px saturate.
pub fn save_disparity_png(path: &Path, raster: &FloatRaster) -> Result<(), IoError> {
    save_u16(path, raster, |v| {
        if !v.is_finite() || v <= 0.0 {
            return 0;
        }
        (f64::from(v) * DISPARITY_SCALE).round().min(65535.0) as u16
    })
}

pub fn load_disparity_png(path: &Path) -> Result<FloatRaster, IoError> {
    load_u16(path, |v| {
        if v == 0 {
            FloatRaster::INVALID
        } else {
            (f64::from(v) / DISPARITY_SCALE) as f32
        }
    })
}

/// Depth in centimetres encodes as whole millimetres; 0, negatives and
/// NaN become the invalid sentinel. Depths past 6553.5 cm saturate.
pub fn save_depth_png(path: &Path, raster: &FloatRaster) -> Result<(), IoError> {
    save_u16(path, raster, |v| {
        if !v.is_finite() || v <= 0.0 {
            return 0;
        }
        (f64::from(v) * DEPTH_MM_PER_CM).round().min(65535.0) as u16
    })
}

pub fn load_depth_png(path: &Path) -> Result<FloatRaster, IoError> {
    load_u16(path, |v| {
        if v == 0 {
            FloatRaster::INVALID
        } else {
            (f64::from(v) / DEPTH_MM_PER_CM) as f32
        }
    })
}
