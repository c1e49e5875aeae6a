//! Confidence and disparity quality measures.
//!
//! The sparsification curve keeps the most confident valid pixels at each
//! density and records their bad-pixel rate. Pixels with equal confidence
//! cannot be ordered meaningfully, so a tie group that straddles the cut
//! contributes its bad rate in proportion to the share that is kept. This is
//! the expected error over all orderings of the tied pixels and coincides
//! with plain sorting when confidences are distinct.

use crate::error::{Error, Result};
use crate::stereo::{ConfidenceMap, DisparityMap, ValidityMask};

pub const DEFAULT_N_POINTS: usize = 100;
pub const DEFAULT_THRESHOLD_PX: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SparsificationCurve {
    pub densities: Vec<f64>,
    pub errors: Vec<f64>,
    pub threshold_px: f64,
}

impl SparsificationCurve {
    /// `density,error` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("density,error\n");
        for (d, e) in self.densities.iter().zip(&self.errors) {
            s.push_str(&format!("{d},{e}\n"));
        }
        s
    }
}

fn check_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// `|d − d_gt| > threshold_px` for each valid pixel, in pixel order.
pub fn bad_flags(d: &DisparityMap, d_gt: &DisparityMap, valid: &ValidityMask, threshold_px: f64) -> Result<Vec<bool>> {
    check_dims((d.height, d.width), (d_gt.height, d_gt.width), "disparity vs ground truth")?;
    check_dims((d.height, d.width), (valid.height, valid.width), "disparity vs validity")?;
    Ok(d.data
        .iter()
        .zip(&d_gt.data)
        .zip(&valid.data)
        .filter(|(_, &v)| v)
        .map(|((&a, &b), _)| (a - b).abs() > threshold_px)
        .collect())
}

/// Sparsification over already-selected pixels.
pub fn sparsification_from_flags(conf: &[f64], bad: &[bool], threshold_px: f64, n_points: usize) -> Result<SparsificationCurve> {
    if n_points < 2 {
        return Err(Error::invalid(format!("n_points {n_points} must be ≥ 2")));
    }
    if conf.len() != bad.len() {
        return Err(Error::shape("confidence and bad-flag lengths differ"));
    }
    if conf.is_empty() {
        return Err(Error::NoValidPixels("sparsification"));
    }
    if conf.iter().any(|c| c.is_nan()) {
        return Err(Error::invalid("NaN confidence"));
    }
    let mut order: Vec<usize> = (0..conf.len()).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
    // (size, bad count) of each run of equal confidence, most confident first
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut prev = None;
    for &i in &order {
        if prev == Some(conf[i]) {
            let g = groups.last_mut().unwrap();
            g.0 += 1;
            g.1 += bad[i] as usize;
        } else {
            groups.push((1, bad[i] as usize));
            prev = Some(conf[i]);
        }
    }
    let n = conf.len();
    let mut densities = Vec::with_capacity(n_points);
    let mut errors = Vec::with_capacity(n_points);
    for j in 0..n_points {
        let density = 1.0 - j as f64 / n_points as f64;
        let keep = ((density * n as f64).ceil() as usize).clamp(1, n);
        let mut left = keep;
        let mut bad_kept = 0.0;
        for &(size, nb) in &groups {
            if left == 0 {
                break;
            }
            if size <= left {
                bad_kept += nb as f64;
                left -= size;
            } else {
                bad_kept += nb as f64 * left as f64 / size as f64;
                left = 0;
            }
        }
        densities.push(density);
        errors.push(bad_kept / keep as f64);
    }
    Ok(SparsificationCurve {
        densities,
        errors,
        threshold_px,
    })
}

pub fn sparsification(
    q: &ConfidenceMap,
    d: &DisparityMap,
    d_gt: &DisparityMap,
    valid: &ValidityMask,
    threshold_px: f64,
    n_points: usize,
) -> Result<SparsificationCurve> {
    check_dims((q.height, q.width), (d.height, d.width), "confidence vs disparity")?;
    let bad = bad_flags(d, d_gt, valid, threshold_px)?;
    let conf: Vec<f64> = q
        .data
        .iter()
        .zip(&valid.data)
        .filter(|(_, &v)| v)
        .map(|(&c, _)| c)
        .collect();
    sparsification_from_flags(&conf, &bad, threshold_px, n_points)
}

/// Trapezoidal area under the curve divided by the density span.
pub fn auc(curve: &SparsificationCurve) -> f64 {
    let (d, e) = (&curve.densities, &curve.errors);
    let mut area = 0.0;
    for j in 1..d.len() {
        area += 0.5 * (e[j - 1] + e[j]) * (d[j - 1] - d[j]);
    }
    let span = d[0] - d[d.len() - 1];
    area / span
}

/// AUC of the oracle confidence `1 − bad`, the lowest attainable.
pub fn optimal_auc(d: &DisparityMap, d_gt: &DisparityMap, valid: &ValidityMask, threshold_px: f64, n_points: usize) -> Result<f64> {
    let bad = bad_flags(d, d_gt, valid, threshold_px)?;
    let conf: Vec<f64> = bad.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
    sparsification_from_flags(&conf, &bad, threshold_px, n_points).map(|c| auc(&c))
}

/// Mean of `(q − q*)²` over valid pixels.
pub fn mse_confidence(q: &ConfidenceMap, q_star: &ConfidenceMap, valid: &ValidityMask) -> Result<f64> {
    check_dims((q.height, q.width), (q_star.height, q_star.width), "confidence maps")?;
    check_dims((q.height, q.width), (valid.height, valid.width), "confidence vs validity")?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&a, &b), &v) in q.data.iter().zip(&q_star.data).zip(&valid.data) {
        if v {
            sum += (a - b) * (a - b);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoValidPixels("confidence MSE"));
    }
    Ok(sum / n as f64)
}

/// Bad matching percentage in `[0, 100]`.
pub fn bmp(d: &DisparityMap, d_gt: &DisparityMap, valid: &ValidityMask, threshold_px: f64) -> Result<f64> {
    if !(threshold_px > 0.0) {
        return Err(Error::invalid(format!("threshold {threshold_px} must be positive")));
    }
    let bad = bad_flags(d, d_gt, valid, threshold_px)?;
    if bad.is_empty() {
        return Err(Error::NoValidPixels("bad matching percentage"));
    }
    Ok(100.0 * bad.iter().filter(|&&b| b).count() as f64 / bad.len() as f64)
}
