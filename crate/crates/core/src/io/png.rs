//! PNG images and masks, plus PFM wrappers for disparity and confidence.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::pfm::{read_pfm, write_pfm, FloatMap};
use crate::error::{Error, Result};
use crate::stereo::{ConfidenceKind, ConfidenceMap, DisparityMap, Image, ValidityMask};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an 8-bit PNG as RGB in `[0, 1]`; gray inputs are expanded.
pub fn read_rgb_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Image::new(h as usize, w as usize, 3, data)
}

/// Writes a 3-channel image, clamping to `[0, 1]` and rounding to 8 bits.
pub fn write_rgb_png(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::shape(format!("RGB PNG needs 3 channels, got {}", img.channels)));
    }
    let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(
        img.width as u32,
        img.height as u32,
        img.data.iter().map(|&v| to_u8(v)).collect(),
    )
    .ok_or_else(|| Error::shape("image buffer size"))?;
    buf.save(path)?;
    Ok(())
}

/// Writes `values` mapped linearly from `[lo, hi]` to 8-bit gray.
pub fn write_gray_png(path: &Path, height: usize, width: usize, values: &[f64], lo: f64, hi: f64) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape("gray PNG size"));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(
        width as u32,
        height as u32,
        values.iter().map(|&v| to_u8((v - lo) / span)).collect(),
    )
    .ok_or_else(|| Error::shape("image buffer size"))?;
    buf.save(path)?;
    Ok(())
}

/// Mask PNG: 255 where valid, 0 elsewhere.
pub fn write_mask_png(path: &Path, mask: &ValidityMask) -> Result<()> {
    let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(
        mask.width as u32,
        mask.height as u32,
        mask.data.iter().map(|&v| if v { 255 } else { 0 }).collect(),
    )
    .ok_or_else(|| Error::shape("mask buffer size"))?;
    buf.save(path)?;
    Ok(())
}

/// Any nonzero gray level counts as valid.
pub fn read_mask_png(path: &Path) -> Result<ValidityMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(ValidityMask {
        height: h as usize,
        width: w as usize,
        data: img.as_raw().iter().map(|&v| v != 0).collect(),
    })
}

/// 16-bit KITTI disparity: value / 256, with 0 marking missing ground truth.
pub fn read_kitti_disparity(path: &Path) -> Result<(DisparityMap, ValidityMask)> {
    let dynimg = image::open(path)?;
    if !matches!(dynimg, image::DynamicImage::ImageLuma16(_)) {
        return Err(Error::invalid(format!(
            "{} is not a 16-bit single-channel PNG",
            path.display()
        )));
    }
    let img = dynimg.to_luma16();
    let (w, h) = img.dimensions();
    let raw = img.as_raw();
    let data = raw.iter().map(|&v| v as f64 / 256.0).collect();
    let valid = ValidityMask {
        height: h as usize,
        width: w as usize,
        data: raw.iter().map(|&v| v != 0).collect(),
    };
    Ok((DisparityMap::new(h as usize, w as usize, data)?, valid))
}

fn to_float_map(height: usize, width: usize, data: &[f64]) -> FloatMap {
    FloatMap {
        height,
        width,
        data: data.iter().map(|&v| v as f32).collect(),
    }
}

pub fn write_disparity_pfm(path: &Path, d: &DisparityMap) -> Result<()> {
    write_pfm(path, &to_float_map(d.height, d.width, &d.data))
}

pub fn read_disparity_pfm(path: &Path) -> Result<DisparityMap> {
    let m = read_pfm(path)?;
    DisparityMap::new(m.height, m.width, m.data.iter().map(|&v| v as f64).collect())
}

pub fn write_confidence_pfm(path: &Path, q: &ConfidenceMap) -> Result<()> {
    write_pfm(path, &to_float_map(q.height, q.width, &q.data))
}

pub fn read_confidence_pfm(path: &Path, kind: ConfidenceKind) -> Result<ConfidenceMap> {
    let m = read_pfm(path)?;
    ConfidenceMap::new(m.height, m.width, m.data.iter().map(|&v| v as f64).collect(), kind)
}
