//! Stereo samples, census/SGM raw costs, synthetic scenes, ground-truth
//! confidence and image warping.

mod census;
mod sgm;
mod synth;
mod types;

pub use census::{census_transform, compute_raw_cost, hamming, CensusCodes};
pub use sgm::{sgm_aggregate, wta_disparity};
pub use synth::{synth_dataset, synth_scene};
pub use types::{
    ConfidenceKind, ConfidenceMap, CostKind, CostVolume, DisparityMap, Image, StereoSample,
    ValidityMask,
};

use crate::error::{Error, Result};
use crate::nn::tape::warp_tap;

/// Default truncation threshold (px) for ground-truth confidence.
pub const DEFAULT_RHO: f64 = 0.9;
/// Census window used for raw costs.
pub const CENSUS_WINDOW: usize = 5;
pub const SGM_P1: f64 = 0.008;
pub const SGM_P2: f64 = 0.126;
pub const SGM_PATHS: usize = 4;

/// Census cost followed by SGM with the default penalties and paths.
pub fn census_sgm_cost(sample: &StereoSample) -> Result<CostVolume> {
    let raw = compute_raw_cost(sample, CENSUS_WINDOW)?;
    sgm_aggregate(&raw, SGM_P1, SGM_P2, SGM_PATHS)
}

/// Binary confidence: 1 where the pixel is valid and `|d_est − d_gt| < rho`.
///
/// Invalid pixels get 0 and must be excluded through `valid` by every
/// consumer.
pub fn ground_truth_confidence(
    d_est: &DisparityMap,
    d_gt: &DisparityMap,
    valid: &ValidityMask,
    rho: f64,
) -> Result<ConfidenceMap> {
    if !(rho > 0.0) {
        return Err(Error::invalid(format!("rho {rho} must be positive")));
    }
    let dims = (d_est.height, d_est.width);
    if dims != (d_gt.height, d_gt.width) || dims != (valid.height, valid.width) {
        return Err(Error::invalid(format!(
            "shape mismatch: estimate {dims:?}, ground truth {:?}, mask {:?}",
            (d_gt.height, d_gt.width),
            (valid.height, valid.width)
        )));
    }
    let data = d_est
        .data
        .iter()
        .zip(&d_gt.data)
        .zip(&valid.data)
        .map(|((&e, &g), &v)| if v && (e - g).abs() < rho { 1.0 } else { 0.0 })
        .collect();
    ConfidenceMap::new(dims.0, dims.1, data, ConfidenceKind::GroundTruth)
}

/// Samples `image` at `(x − disparity, y)`, linear along x with the source
/// column clamped to `[0, W−1]`.
pub fn bilinear_warp(image: &Image, disparity: &DisparityMap) -> Result<Image> {
    if image.height != disparity.height || image.width != disparity.width {
        return Err(Error::shape("warp disparity does not match image"));
    }
    if disparity.data.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("warp disparity".into()));
    }
    let (w, c) = (image.width, image.channels);
    let mut out = Vec::with_capacity(image.data.len());
    for (p, &d) in disparity.data.iter().enumerate() {
        let (x0, x1, f, _) = warp_tap(p % w, d, w);
        let base = (p / w) * w;
        for ch in 0..c {
            let a = image.data[(base + x0) * c + ch];
            let b = image.data[(base + x1) * c + ch];
            out.push(a + f * (b - a));
        }
    }
    Image::new(image.height, image.width, c, out)
}
