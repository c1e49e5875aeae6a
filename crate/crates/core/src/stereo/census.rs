use super::types::{CostKind, CostVolume, Image, StereoSample};
use crate::error::{Error, Result};

/// Per-pixel census codes of one image channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CensusCodes {
    pub height: usize,
    pub width: usize,
    /// Bits per code, `window² − 1`.
    pub bits: usize,
    pub codes: Vec<u64>,
}

fn check_window(window: usize) -> Result<()> {
    match window {
        3 | 5 | 7 => Ok(()),
        w if w % 2 == 0 => Err(Error::invalid(format!("census window {w} must be odd"))),
        w => Err(Error::invalid(format!("census window {w} not in {{3, 5, 7}}"))),
    }
}

/// Census transform of a single-channel image.
///
/// Neighbors are visited in row-major order with the center skipped; the
/// first neighbor lands in the most significant bit. A bit is set when the
/// neighbor is strictly darker than the center. Borders replicate.
pub fn census_transform(image: &Image, window: usize) -> Result<CensusCodes> {
    check_window(window)?;
    if image.channels != 1 {
        return Err(Error::invalid(format!(
            "census transform needs one channel, got {}",
            image.channels
        )));
    }
    if image.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("census input".into()));
    }
    let (h, w) = (image.height, image.width);
    let r = (window / 2) as isize;
    let mut codes = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let center = image.data[y * w + x];
            let mut code = 0u64;
            for dy in -r..=r {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    code = (code << 1) | u64::from(image.data[yy * w + xx] < center);
                }
            }
            codes.push(code);
        }
    }
    Ok(CensusCodes {
        height: h,
        width: w,
        bits: window * window - 1,
        codes,
    })
}

/// Normalized census matching cost.
///
/// `cost(y, x, d)` is the Hamming distance between the left code at `x` and
/// the right code at `max(x − d, 0)`, divided by the code length and
/// averaged over color channels. Values lie in `[0, 1]`.
pub fn compute_raw_cost(sample: &StereoSample, window: usize) -> Result<CostVolume> {
    check_window(window)?;
    if sample.d_max < 2 {
        return Err(Error::invalid(format!("d_max {} must be ≥ 2", sample.d_max)));
    }
    if !sample.left.same_size(&sample.right) || sample.left.channels != sample.right.channels {
        return Err(Error::shape("left and right images differ in shape"));
    }
    let (h, w, dm) = (sample.height(), sample.width(), sample.d_max);
    let channels = sample.left.channels;
    let norm = ((window * window - 1) * channels) as f64;
    let mut hamming = vec![0u32; h * w * dm];
    for c in 0..channels {
        let left = census_transform(&sample.left.channel(c), window)?;
        let right = census_transform(&sample.right.channel(c), window)?;
        for y in 0..h {
            for x in 0..w {
                let lc = left.codes[y * w + x];
                let base = (y * w + x) * dm;
                for d in 0..dm {
                    let xr = x.saturating_sub(d);
                    hamming[base + d] += (lc ^ right.codes[y * w + xr]).count_ones();
                }
            }
        }
    }
    let data = hamming.into_iter().map(|v| v as f64 / norm).collect();
    CostVolume::new(h, w, dm, data, CostKind::Raw)
}

/// Hamming distance between two census codes.
pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}
