use crate::batch::{disparities_tensor, images_tensor};
use crate::error::{Error, Result};
use crate::nn::{Tape, Var};
use crate::stereo::{ConfidenceMap, DisparityMap, StereoSample, ValidityMask};
use crate::tensor::{Scalar, Tensor};

/// Clamp applied to confidences inside logarithms.
pub const CONF_EPS: f64 = 1e-7;

/// The disparity loss on a tape.
pub struct DispLossGraph {
    pub total: Var,
    pub supervised: Var,
    pub recon: Option<Var>,
    /// Set when the batch has no valid ground-truth pixel, in which case the
    /// supervised term is 0.
    pub no_valid: bool,
}

/// `mean_valid |d − d*| + recon_weight · mean |warp(I^r, d) − I^l|`.
///
/// `disp` is `N×H×W×1`; `recon_pixels` optionally restricts the
/// reconstruction mean to the pixels with weight 1.
pub fn disp_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    disp: Var,
    batch: &[&StereoSample],
    recon_weight: f64,
    recon_pixels: Option<&[T]>,
) -> Result<DispLossGraph> {
    let gt: Vec<&DisparityMap> = batch.iter().map(|s| &s.gt_disparity).collect();
    let gt = disparities_tensor::<T>(&gt)?;
    if tape.value(disp).shape() != gt.shape() {
        return Err(Error::shape(format!(
            "predicted disparity {:?} vs ground truth {:?}",
            tape.value(disp).shape(),
            gt.shape()
        )));
    }
    let valid: Vec<T> = batch
        .iter()
        .flat_map(|s| s.gt_valid.data.iter().map(|&v| if v { T::one() } else { T::zero() }))
        .collect();
    let no_valid = valid.iter().all(|&v| v == T::zero());
    let supervised = tape.masked_mean_abs(disp, gt.data(), &valid)?;
    if recon_weight == 0.0 {
        return Ok(DispLossGraph {
            total: supervised,
            supervised,
            recon: None,
            no_valid,
        });
    }
    let rights: Vec<_> = batch.iter().map(|s| &s.right).collect();
    let lefts: Vec<_> = batch.iter().map(|s| &s.left).collect();
    let right = tape.constant(images_tensor::<T>(&rights)?);
    let left = images_tensor::<T>(&lefts)?;
    let c = left.last_dim();
    let weights: Vec<T> = match recon_pixels {
        None => vec![T::one(); left.len()],
        Some(px) => px.iter().flat_map(|&w| std::iter::repeat_n(w, c)).collect(),
    };
    let warped = tape.warp(right, disp)?;
    let recon = tape.masked_mean_abs(warped, left.data(), &weights)?;
    let total = tape.linear(&[(supervised, T::one()), (recon, T::of(recon_weight))])?;
    Ok(DispLossGraph {
        total,
        supervised,
        recon: Some(recon),
        no_valid,
    })
}

/// `−mean_pos log q − mean_neg log(1 − q)`.
pub fn conf_loss_graph<T: Scalar>(tape: &mut Tape<T>, q: Var, pos: &[T], neg: &[T]) -> Result<Var> {
    let eps = T::of(CONF_EPS);
    let lp = tape.masked_mean_neg_log(q, pos, true, eps)?;
    let ln = tape.masked_mean_neg_log(q, neg, false, eps)?;
    tape.add(lp, ln)
}

/// `−mean_neg log q`: the generator wants negatives to look confident.
pub fn adv_loss_graph<T: Scalar>(tape: &mut Tape<T>, q: Var, neg: &[T]) -> Result<Var> {
    tape.masked_mean_neg_log(q, neg, true, T::of(CONF_EPS))
}

/// Positive and negative pixel weights from a ground-truth confidence.
pub(crate) fn split_masks<T: Scalar>(q_star: &[f64], valid: &[bool]) -> (Vec<T>, Vec<T>) {
    let pos = q_star
        .iter()
        .zip(valid)
        .map(|(&q, &v)| if v && q == 1.0 { T::one() } else { T::zero() })
        .collect();
    let neg = q_star
        .iter()
        .zip(valid)
        .map(|(&q, &v)| if v && q == 0.0 { T::one() } else { T::zero() })
        .collect();
    (pos, neg)
}

fn map_tensor(h: usize, w: usize, data: &[f64]) -> Result<Tensor<f64>> {
    Tensor::from_vec(&[1, h, w, 1], data.to_vec())
}

fn check_maps(q: &ConfidenceMap, q_star: &ConfidenceMap, valid: &ValidityMask) -> Result<()> {
    let d = (q.height, q.width);
    if d != (q_star.height, q_star.width) || d != (valid.height, valid.width) {
        return Err(Error::invalid("confidence maps differ in shape"));
    }
    Ok(())
}

/// Value of the disparity loss for one prediction, and whether the sample
/// had no valid ground truth.
pub fn loss_disp(d_pred: &DisparityMap, sample: &StereoSample, recon_weight: f64) -> Result<(f64, bool)> {
    let mut tape = Tape::<f64>::new();
    let d = tape.constant(map_tensor(d_pred.height, d_pred.width, &d_pred.data)?);
    let g = disp_loss_graph(&mut tape, d, &[sample], recon_weight, None)?;
    Ok((tape.value(g.total).data()[0], g.no_valid))
}

/// Confidence-network loss (masked binary cross-entropy).
pub fn loss_conf_f(q: &ConfidenceMap, q_star: &ConfidenceMap, valid: &ValidityMask) -> Result<f64> {
    check_maps(q, q_star, valid)?;
    let (pos, neg) = split_masks::<f64>(&q_star.data, &valid.data);
    let mut tape = Tape::new();
    let qv = tape.constant(map_tensor(q.height, q.width, &q.data)?);
    let l = conf_loss_graph(&mut tape, qv, &pos, &neg)?;
    Ok(tape.value(l).data()[0])
}

/// Non-saturating adversarial loss of the generator.
pub fn loss_adv_g(q: &ConfidenceMap, q_star: &ConfidenceMap, valid: &ValidityMask) -> Result<f64> {
    check_maps(q, q_star, valid)?;
    let (_, neg) = split_masks::<f64>(&q_star.data, &valid.data);
    let mut tape = Tape::new();
    let qv = tape.constant(map_tensor(q.height, q.width, &q.data)?);
    let l = adv_loss_graph(&mut tape, qv, &neg)?;
    Ok(tape.value(l).data()[0])
}
