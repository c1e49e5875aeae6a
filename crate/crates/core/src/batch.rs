//! Conversions between per-image maps and batched `N×H×W×C` tensors.

use crate::error::{Error, Result};
use crate::stereo::{CostVolume, DisparityMap, Image};
use crate::tensor::{Scalar, Tensor};

fn check_sizes(dims: impl Iterator<Item = (usize, usize)>) -> Result<(usize, usize, usize)> {
    let mut n = 0;
    let mut first = None;
    for d in dims {
        match first {
            None => first = Some(d),
            Some(f) if f != d => {
                return Err(Error::shape(format!("batch items differ in size: {f:?} vs {d:?}")))
            }
            _ => {}
        }
        n += 1;
    }
    let (h, w) = first.ok_or_else(|| Error::invalid("empty batch"))?;
    Ok((n, h, w))
}

pub fn costs_tensor<T: Scalar>(costs: &[&CostVolume]) -> Result<Tensor<T>> {
    let (n, h, w) = check_sizes(costs.iter().map(|c| (c.height, c.width)))?;
    let d = costs[0].disparities;
    if costs.iter().any(|c| c.disparities != d) {
        return Err(Error::shape("batch items differ in disparity count"));
    }
    let data = costs
        .iter()
        .flat_map(|c| c.data.iter().map(|&v| T::of(v)))
        .collect();
    Tensor::from_vec(&[n, h, w, d], data)
}

pub fn images_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let (n, h, w) = check_sizes(images.iter().map(|i| (i.height, i.width)))?;
    let c = images[0].channels;
    if images.iter().any(|i| i.channels != c) {
        return Err(Error::shape("batch items differ in channel count"));
    }
    let data = images
        .iter()
        .flat_map(|i| i.data.iter().map(|&v| T::of(v)))
        .collect();
    Tensor::from_vec(&[n, h, w, c], data)
}

pub fn disparities_tensor<T: Scalar>(maps: &[&DisparityMap]) -> Result<Tensor<T>> {
    let (n, h, w) = check_sizes(maps.iter().map(|m| (m.height, m.width)))?;
    let data = maps
        .iter()
        .flat_map(|m| m.data.iter().map(|&v| T::of(v)))
        .collect();
    Tensor::from_vec(&[n, h, w, 1], data)
}

/// Splits an `N×H×W×C` tensor into `N` per-image `f64` buffers.
pub fn split_batch<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let (n, h, w, c) = t.dims4()?;
    Ok(t.data()
        .chunks_exact((h * w * c).max(1))
        .take(n)
        .map(|chunk| chunk.iter().map(|v| v.as_f64()).collect())
        .collect())
}

/// Luminance plus two color-difference channels of an RGB image.
///
/// Single-channel images are treated as gray (zero chroma).
pub fn luma_chroma(image: &Image) -> Image {
    let mut data = Vec::with_capacity(image.height * image.width * 3);
    for px in image.data.chunks_exact(image.channels) {
        let (r, g, b) = if image.channels >= 3 {
            (px[0], px[1], px[2])
        } else {
            (px[0], px[0], px[0])
        };
        let y = 0.299 * r + 0.587 * g + 0.114 * b;
        data.extend_from_slice(&[y, 0.564 * (b - y), 0.713 * (r - y)]);
    }
    Image {
        height: image.height,
        width: image.width,
        channels: 3,
        data,
    }
}
