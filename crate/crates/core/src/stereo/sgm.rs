use super::types::{CostVolume, DisparityMap};
use crate::error::{Error, Result};

/// Aggregation directions, in the order they are enabled by `paths`.
const DIRECTIONS: [(isize, isize); 4] = [(0, 1), (0, -1), (1, 0), (-1, 0)];

/// Semi-global aggregation averaged over 1, 2 or 4 axis-aligned paths
/// (left→right; then right→left; then both vertical directions).
pub fn sgm_aggregate(cost: &CostVolume, p1: f64, p2: f64, paths: usize) -> Result<CostVolume> {
    if !(p1 > 0.0 && p1 <= p2) {
        return Err(Error::invalid(format!(
            "SGM penalties need 0 < p1 ≤ p2, got p1={p1}, p2={p2}"
        )));
    }
    if !matches!(paths, 1 | 2 | 4) {
        return Err(Error::invalid(format!("SGM paths {paths} not in {{1, 2, 4}}")));
    }
    let mut sum = vec![0.0; cost.data.len()];
    for &(dy, dx) in &DIRECTIONS[..paths] {
        let l = aggregate_path(cost, dy, dx, p1, p2);
        for (s, v) in sum.iter_mut().zip(l) {
            *s += v;
        }
    }
    let inv = 1.0 / paths as f64;
    let data = sum.into_iter().map(|v| v * inv).collect();
    CostVolume::new(cost.height, cost.width, cost.disparities, data, cost.kind)
}

/// Path costs for a single direction `(dy, dx)`.
fn aggregate_path(cost: &CostVolume, dy: isize, dx: isize, p1: f64, p2: f64) -> Vec<f64> {
    let (h, w, nd) = (cost.height, cost.width, cost.disparities);
    let mut out = vec![0.0; cost.data.len()];
    // scanlines: rows for horizontal paths, columns for vertical ones
    let (lines, len) = if dy == 0 { (h, w) } else { (w, h) };
    let forward = dx > 0 || dy > 0;
    for line in 0..lines {
        let pos = |t: usize| -> usize {
            let t = if forward { t } else { len - 1 - t };
            let (y, x) = if dy == 0 { (line, t) } else { (t, line) };
            (y * w + x) * nd
        };
        let first = pos(0);
        out[first..first + nd].copy_from_slice(&cost.data[first..first + nd]);
        for t in 1..len {
            let prev = pos(t - 1);
            let cur = pos(t);
            let min_prev = out[prev..prev + nd]
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            for d in 0..nd {
                let mut best = out[prev + d];
                if d > 0 {
                    best = best.min(out[prev + d - 1] + p1);
                }
                if d + 1 < nd {
                    best = best.min(out[prev + d + 1] + p1);
                }
                best = best.min(min_prev + p2);
                out[cur + d] = cost.data[cur + d] + best - min_prev;
            }
        }
    }
    out
}

/// Per-pixel argmin over candidates; ties go to the smaller disparity.
pub fn wta_disparity(cost: &CostVolume) -> DisparityMap {
    let data = cost
        .data
        .chunks_exact(cost.disparities)
        .map(|c| {
            let mut best = 0;
            for (d, &v) in c.iter().enumerate().skip(1) {
                if v < c[best] {
                    best = d;
                }
            }
            best as f64
        })
        .collect();
    DisparityMap {
        height: cost.height,
        width: cost.width,
        data,
    }
}
