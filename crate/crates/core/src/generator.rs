//! Cost-aggregation generator: raw cost volume → refined costs, matching
//! probabilities, top-K volume and soft-argmax disparity.
//!
//! The residual network is a small encoder-decoder. Two conv+BN+ReLU blocks
//! run at each of the full, 1/2 and 1/4 resolutions on the way down; the
//! decoder upsamples bilinearly and concatenates the matching encoder
//! features before each block. The last conv maps back to `D` channels and
//! starts at zero, so an untrained generator returns the raw costs.

use crate::batch::{costs_tensor, split_batch};
use crate::error::{Error, Result};
use crate::nn::{add_conv_bn, BnMode, Init, Net, ParamStore, Tape, Var};
use crate::stereo::{CostKind, CostVolume, DisparityMap};
use crate::tensor::{Scalar, Tensor};

/// Flatness for normalized census/SGM costs.
pub const DEFAULT_SIGMA: f64 = 0.01;
/// Flatness suited to unnormalized census/SGM costs (Hamming counts).
pub const SIGMA_UNNORMALIZED_CENSUS: f64 = 100.0;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub sigma: f64,
    pub k: usize,
    pub d_max: usize,
}

impl GeneratorConfig {
    /// Desk-scale widths.
    pub fn tiny(d_max: usize) -> Self {
        GeneratorConfig {
            base_channels: 16,
            sigma: DEFAULT_SIGMA,
            k: DEFAULT_TOP_K.min(d_max),
            d_max,
        }
    }

    /// Full-width layer plan.
    pub fn full(d_max: usize) -> Self {
        GeneratorConfig {
            base_channels: 64,
            ..Self::tiny(d_max)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::invalid("generator base_channels must be ≥ 1"));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("sigma {} must be positive", self.sigma)));
        }
        if self.d_max < 2 {
            return Err(Error::invalid(format!("d_max {} must be ≥ 2", self.d_max)));
        }
        if self.k == 0 || self.k > self.d_max {
            return Err(Error::invalid(format!(
                "top-k {} outside [1, {}]",
                self.k, self.d_max
            )));
        }
        Ok(())
    }
}

/// Per-pixel distribution over disparity candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingProbabilityVolume {
    pub height: usize,
    pub width: usize,
    pub disparities: usize,
    pub data: Vec<f64>,
}

impl MatchingProbabilityVolume {
    pub fn probs(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.disparities;
        &self.data[i..i + self.disparities]
    }
}

/// The `k` largest matching probabilities per pixel, descending.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKVolume {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub data: Vec<f64>,
}

/// Creates the generator parameters (all names prefixed `g.`).
pub fn init_generator_params<T: Scalar>(cfg: &GeneratorConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let c = cfg.base_channels;
    let d = cfg.d_max;
    let mut s = ParamStore::new(seed);
    add_conv_bn(&mut s, "g.conv1", 3, d, c)?;
    add_conv_bn(&mut s, "g.conv1b", 3, c, c)?;
    add_conv_bn(&mut s, "g.conv2", 3, c, 2 * c)?;
    add_conv_bn(&mut s, "g.conv2b", 3, 2 * c, 2 * c)?;
    add_conv_bn(&mut s, "g.conv3", 3, 2 * c, 2 * c)?;
    add_conv_bn(&mut s, "g.conv3b", 3, 2 * c, 2 * c)?;
    add_conv_bn(&mut s, "g.conv4", 3, 4 * c, c)?;
    add_conv_bn(&mut s, "g.conv4b", 3, c, c)?;
    s.add_conv("g.conv5", 3, 2 * c, d, Init::Zeros)?;
    Ok(s)
}

/// Tape nodes of one generator forward.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorGraph {
    pub residual: Var,
    pub refined: Var,
    pub prob: Var,
    pub topk: Var,
    /// `N×H×W×1`.
    pub disparity: Var,
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "generator needs spatial dims divisible by 4, got {h}×{w}"
        )));
    }
    Ok(())
}

/// Residual of the encoder-decoder for a batched raw cost `N×H×W×D`.
pub fn residual_graph<T: Scalar>(net: &mut Net<'_, T>, raw: Var) -> Result<Var> {
    let (_, h, w, _) = net.tape.value(raw).dims4()?;
    check_divisible(h, w)?;
    let e1 = net.conv_bn_relu("g.conv1", raw)?;
    let e1 = net.conv_bn_relu("g.conv1b", e1)?;
    let p1 = net.tape.max_pool2(e1)?;
    let e2 = net.conv_bn_relu("g.conv2", p1)?;
    let e2 = net.conv_bn_relu("g.conv2b", e2)?;
    let p2 = net.tape.max_pool2(e2)?;
    let e3 = net.conv_bn_relu("g.conv3", p2)?;
    let e3 = net.conv_bn_relu("g.conv3b", e3)?;
    let u2 = net.tape.upsample2(e3)?;
    let s2 = net.tape.concat(&[u2, e2])?;
    let d2 = net.conv_bn_relu("g.conv4", s2)?;
    let d2 = net.conv_bn_relu("g.conv4b", d2)?;
    let u1 = net.tape.upsample2(d2)?;
    let s1 = net.tape.concat(&[u1, e1])?;
    net.conv("g.conv5", s1)
}

/// Full generator forward on a tape.
pub fn generator_graph<T: Scalar>(
    net: &mut Net<'_, T>,
    raw: Var,
    cfg: &GeneratorConfig,
) -> Result<GeneratorGraph> {
    cfg.validate()?;
    let d = net.tape.value(raw).last_dim();
    if d != cfg.d_max {
        return Err(Error::shape(format!(
            "cost volume has {d} candidates, generator expects {}",
            cfg.d_max
        )));
    }
    let residual = residual_graph(net, raw)?;
    let refined = net.tape.add(raw, residual)?;
    let logits = net.tape.scale(refined, T::of(-1.0 / cfg.sigma));
    let prob = net.tape.softmax(logits);
    let topk = net.tape.topk(prob, cfg.k)?;
    let disparity = net.tape.soft_argmax(prob);
    Ok(GeneratorGraph {
        residual,
        refined,
        prob,
        topk,
        disparity,
    })
}

/// Refined cost `raw + residual`, evaluated with running batch-norm
/// statistics.
pub fn residual_aggregate<T: Scalar>(
    raw: &CostVolume,
    params: &ParamStore<T>,
    cfg: &GeneratorConfig,
) -> Result<CostVolume> {
    cfg.validate()?;
    check_divisible(raw.height, raw.width)?;
    let mut tape = Tape::new();
    let x = tape.constant(costs_tensor::<T>(&[raw])?);
    let mut net = Net::new(&mut tape, params, BnMode::Eval);
    let r = residual_graph(&mut net, x)?;
    let residual = split_batch(tape.value(r))?.remove(0);
    let data = raw.data.iter().zip(residual).map(|(a, b)| a + b).collect();
    CostVolume::new(raw.height, raw.width, raw.disparities, data, CostKind::Refined)
}

/// Max-shifted softmax of `−R/σ` over candidates.
pub fn normalize_probability(refined: &CostVolume, sigma: f64) -> Result<MatchingProbabilityVolume> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma {sigma} must be positive")));
    }
    let nd = refined.disparities;
    let mut data = Vec::with_capacity(refined.data.len());
    for row in refined.data.chunks_exact(nd) {
        let m = row.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let start = data.len();
        let mut s = 0.0;
        for &r in row {
            let e = (-(r - m) / sigma).exp();
            s += e;
            data.push(e);
        }
        data[start..].iter_mut().for_each(|e| *e /= s);
    }
    Ok(MatchingProbabilityVolume {
        height: refined.height,
        width: refined.width,
        disparities: nd,
        data,
    })
}

pub fn topk_pool(p: &MatchingProbabilityVolume, k: usize) -> Result<TopKVolume> {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(
        &[p.height * p.width, p.disparities],
        p.data.clone(),
    )?);
    let y = tape.topk(x, k)?;
    Ok(TopKVolume {
        height: p.height,
        width: p.width,
        k,
        data: tape.value(y).data().to_vec(),
    })
}

pub fn soft_argmax(p: &MatchingProbabilityVolume) -> DisparityMap {
    let data = p
        .data
        .chunks_exact(p.disparities)
        .map(|row| row.iter().enumerate().map(|(d, &v)| d as f64 * v).sum())
        .collect();
    DisparityMap {
        height: p.height,
        width: p.width,
        data,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorOutput {
    pub topk: TopKVolume,
    pub disparity: DisparityMap,
    pub prob: MatchingProbabilityVolume,
}

/// Inference-mode generator forward for one cost volume.
pub fn generator_forward<T: Scalar>(
    raw: &CostVolume,
    params: &ParamStore<T>,
    cfg: &GeneratorConfig,
) -> Result<GeneratorOutput> {
    let refined = residual_aggregate(raw, params, cfg)?;
    let prob = normalize_probability(&refined, cfg.sigma)?;
    Ok(GeneratorOutput {
        topk: topk_pool(&prob, cfg.k)?,
        disparity: soft_argmax(&prob),
        prob,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stereo::{census_sgm_cost, wta_disparity};

    fn random_cost(h: usize, w: usize, d: usize, seed: u64) -> CostVolume {
        use rand::Rng;
        let mut rng = crate::rng::substream(seed, "test");
        let data = (0..h * w * d).map(|_| rng.random_range(0.0..1.0)).collect();
        CostVolume::new(h, w, d, data, CostKind::Raw).unwrap()
    }

    #[test]
    fn zero_final_conv_gives_identity_refinement() {
        let cfg = GeneratorConfig::tiny(8);
        let g = init_generator_params::<f32>(&cfg, 3).unwrap();
        let raw = random_cost(16, 16, 8, 1);
        let refined = residual_aggregate(&raw, &g, &cfg).unwrap();
        assert_eq!(refined.data, raw.data);
        assert_eq!(refined.kind, CostKind::Refined);
    }

    #[test]
    fn shapes() {
        let cfg = GeneratorConfig::tiny(8);
        let g = init_generator_params::<f64>(&cfg, 3).unwrap();
        let out = generator_forward(&random_cost(16, 16, 8, 2), &g, &cfg).unwrap();
        assert_eq!((out.topk.height, out.topk.width, out.topk.k), (16, 16, 5));
        assert_eq!(out.topk.data.len(), 16 * 16 * 5);
        assert_eq!(out.disparity.data.len(), 256);
        for row in out.prob.data.chunks_exact(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn indivisible_dims_rejected() {
        let cfg = GeneratorConfig::tiny(4);
        let g = init_generator_params::<f64>(&cfg, 0).unwrap();
        assert!(matches!(
            residual_aggregate(&random_cost(18, 16, 4, 0), &g, &cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn probability_examples() {
        let r = CostVolume::new(1, 1, 4, vec![0.3; 4], CostKind::Refined).unwrap();
        assert_eq!(normalize_probability(&r, 2.0).unwrap().data, vec![0.25; 4]);
        let sigma = 0.7;
        let r = CostVolume::new(1, 1, 2, vec![0.0, sigma], CostKind::Refined).unwrap();
        let p = normalize_probability(&r, sigma).unwrap();
        assert!((p.data[0] - 0.731059).abs() < 1e-6);
        assert!((p.data[1] - 0.268941).abs() < 1e-6);
        let shifted = CostVolume::new(1, 1, 2, vec![5.0, 5.0 + sigma], CostKind::Refined).unwrap();
        let q = normalize_probability(&shifted, sigma).unwrap();
        assert!((q.data[0] - p.data[0]).abs() < 1e-15);
        assert!(normalize_probability(&r, 0.0).is_err());
    }

    #[test]
    fn topk_and_soft_argmax_examples() {
        let p = MatchingProbabilityVolume {
            height: 1,
            width: 1,
            disparities: 4,
            data: vec![0.1, 0.4, 0.2, 0.3],
        };
        assert_eq!(topk_pool(&p, 2).unwrap().data, vec![0.4, 0.3]);
        let full = topk_pool(&p, 4).unwrap();
        assert_eq!(full.data, vec![0.4, 0.3, 0.2, 0.1]);
        assert!((full.data.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(topk_pool(&p, 0).is_err());
        assert!(topk_pool(&p, 5).is_err());

        let one_hot = MatchingProbabilityVolume {
            data: vec![0.0, 0.0, 0.0, 1.0],
            ..p.clone()
        };
        assert_eq!(soft_argmax(&one_hot).data, vec![3.0]);
        let uniform = MatchingProbabilityVolume {
            data: vec![0.25; 4],
            ..p
        };
        assert_eq!(soft_argmax(&uniform).data, vec![1.5]);
    }

    #[test]
    fn huge_sigma_flattens_towards_the_middle() {
        let raw = random_cost(4, 4, 6, 9);
        let p = normalize_probability(&raw, 1e6).unwrap();
        for &d in &soft_argmax(&p).data {
            assert!((d - 2.5).abs() < 1e-3);
        }
    }

    #[test]
    fn untrained_generator_recovers_planar_disparity() {
        let s = crate::stereo::synth_scene(11, 32, 48, 8, 0).unwrap();
        // rebuild the scene as a pure shift by 2 px of its left image
        let mut right = s.left.clone();
        for y in 0..32 {
            for x in 0..48 {
                let src = (x + 2).min(47);
                for c in 0..3 {
                    right.data[(y * 48 + x) * 3 + c] = s.left.at(y, src, c);
                }
            }
        }
        let sample = crate::stereo::StereoSample { right, ..s };
        let raw = census_sgm_cost(&sample).unwrap();
        let cfg = GeneratorConfig::tiny(8);
        let g = init_generator_params::<f32>(&cfg, 1).unwrap();
        let out = generator_forward(&raw, &g, &cfg).unwrap();
        let mut good = 0;
        let mut total = 0;
        for y in 3..29 {
            for x in 5..43 {
                total += 1;
                if (out.disparity.at(y, x) - 2.0).abs() < 0.5 {
                    good += 1;
                }
            }
        }
        assert!(good as f64 >= 0.9 * total as f64, "{good}/{total}");
        let wta = wta_disparity(&raw);
        assert_eq!(wta.at(16, 24), 2.0);
    }
}
