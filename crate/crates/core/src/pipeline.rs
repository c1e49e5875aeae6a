//! Per-image inference, refinement and evaluation built from the library
//! pieces, plus the tabular report.

use std::fmt::Write as _;

use crate::agcp::{refine, AgcpConfig};
use crate::discriminator::{confidence_forward, FusionWeights};
use crate::error::{Error, Result};
use crate::generator::{generator_forward, TopKVolume};
use crate::metrics::{
    auc, bmp, mse_confidence, optimal_auc, sparsification, SparsificationCurve, DEFAULT_N_POINTS,
    DEFAULT_THRESHOLD_PX,
};
use crate::stereo::{
    census_sgm_cost, ground_truth_confidence, ConfidenceMap, CostVolume, DisparityMap, StereoSample,
    DEFAULT_RHO,
};
use crate::tensor::Scalar;
use crate::training::Models;

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub raw: CostVolume,
    pub topk: TopKVolume,
    pub disparity: DisparityMap,
    pub confidence: ConfidenceMap,
    pub weights: Option<FusionWeights>,
}

/// Census/SGM costs, generator disparity and learned confidence.
pub fn infer<T: Scalar>(sample: &StereoSample, models: &Models<T>) -> Result<Inference> {
    let raw = census_sgm_cost(sample)?;
    infer_from_cost(sample, raw, models)
}

pub fn infer_from_cost<T: Scalar>(sample: &StereoSample, raw: CostVolume, models: &Models<T>) -> Result<Inference> {
    let g = generator_forward(&raw, &models.g, &models.gcfg)?;
    let c = confidence_forward(
        &g.topk,
        &g.disparity,
        &sample.left,
        &models.f,
        &models.fcfg,
        models.gcfg.d_max,
    )?;
    Ok(Inference {
        raw,
        topk: g.topk,
        disparity: g.disparity,
        confidence: c.q,
        weights: c.weights,
    })
}

/// One row of the evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub auc: f64,
    pub optimal_auc: f64,
    pub mse: f64,
    pub bmp1: f64,
    pub bmp3: f64,
    pub bmp1_refined: f64,
    pub bmp3_refined: f64,
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "AUC",
    "optimal_AUC",
    "MSE",
    "BMP1",
    "BMP3",
    "BMP1_refined",
    "BMP3_refined",
];

impl ImageMetrics {
    fn values(&self) -> [f64; 7] {
        [
            self.auc,
            self.optimal_auc,
            self.mse,
            self.bmp1,
            self.bmp3,
            self.bmp1_refined,
            self.bmp3_refined,
        ]
    }

    fn from_values(v: [f64; 7]) -> Self {
        ImageMetrics {
            auc: v[0],
            optimal_auc: v[1],
            mse: v[2],
            bmp1: v[3],
            bmp3: v[4],
            bmp1_refined: v[5],
            bmp3_refined: v[6],
        }
    }

    pub fn mean(rows: &[ImageMetrics]) -> Result<ImageMetrics> {
        if rows.is_empty() {
            return Err(Error::invalid("mean of zero report rows"));
        }
        let mut acc = [0.0; 7];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Ok(Self::from_values(acc.map(|a| a / rows.len() as f64)))
    }
}

/// Sparsification settings and the truncation used for `Q*` in the MSE.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub threshold_px: f64,
    pub n_points: usize,
    pub rho: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold_px: DEFAULT_THRESHOLD_PX,
            n_points: DEFAULT_N_POINTS,
            rho: DEFAULT_RHO,
        }
    }
}

/// Scores a disparity/confidence pair against ground truth; `refined` is
/// the disparity after propagation.
pub fn evaluate(
    sample: &StereoSample,
    disparity: &DisparityMap,
    confidence: &ConfidenceMap,
    refined: &DisparityMap,
    cfg: &EvalConfig,
) -> Result<(ImageMetrics, SparsificationCurve)> {
    let (gt, valid) = (&sample.gt_disparity, &sample.gt_valid);
    let t = cfg.threshold_px;
    let curve = sparsification(confidence, disparity, gt, valid, t, cfg.n_points)?;
    let q_star = ground_truth_confidence(disparity, gt, valid, cfg.rho)?;
    let m = ImageMetrics {
        auc: auc(&curve),
        optimal_auc: optimal_auc(disparity, gt, valid, t, cfg.n_points)?,
        mse: mse_confidence(confidence, &q_star, valid)?,
        bmp1: bmp(disparity, gt, valid, 1.0)?,
        bmp3: bmp(disparity, gt, valid, 3.0)?,
        bmp1_refined: bmp(refined, gt, valid, 1.0)?,
        bmp3_refined: bmp(refined, gt, valid, 3.0)?,
    };
    Ok((m, curve))
}

/// Inference, refinement and scoring for one sample.
pub fn infer_and_evaluate<T: Scalar>(
    sample: &StereoSample,
    models: &Models<T>,
    agcp: &AgcpConfig,
    eval: &EvalConfig,
) -> Result<(Inference, DisparityMap, ImageMetrics)> {
    let inf = infer(sample, models)?;
    let refined = refine(&inf.disparity, &inf.confidence, &sample.left, agcp)?;
    let (m, _) = evaluate(sample, &inf.disparity, &inf.confidence, &refined, eval)?;
    Ok((inf, refined, m))
}

/// Per-image rows followed by a `mean` row.
pub fn report_csv(rows: &[(String, ImageMetrics)]) -> Result<String> {
    let mean = ImageMetrics::mean(&rows.iter().map(|(_, m)| m.clone()).collect::<Vec<_>>())?;
    let mut s = String::from("image");
    for c in REPORT_COLUMNS {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for (name, m) in rows.iter().map(|(n, m)| (n.as_str(), m)).chain([("mean", &mean)]) {
        s.push_str(name);
        for v in m.values() {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(bmp1: f64) -> ImageMetrics {
        ImageMetrics::from_values([0.1, 0.05, 0.2, bmp1, 1.0, 2.0, 0.5])
    }

    #[test]
    fn single_row_mean_equals_row() {
        let csv = report_csv(&[("a".into(), row(10.0))]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "image,AUC,optimal_AUC,MSE,BMP1,BMP3,BMP1_refined,BMP3_refined");
        assert_eq!(lines[1]["a".len()..], lines[2]["mean".len()..]);
    }

    #[test]
    fn mean_of_two_rows() {
        let m = ImageMetrics::mean(&[row(10.0), row(20.0)]).unwrap();
        assert_eq!(m.bmp1, 15.0);
        assert!(report_csv(&[]).is_err());
    }
}
