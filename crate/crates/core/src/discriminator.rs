//! Confidence network: top-K matching probabilities, disparity and the left
//! image in, per-pixel confidence out.
//!
//! Each modality runs through its own three-layer conv+BN+ReLU stack at full
//! resolution. The three feature maps are combined either by per-pixel
//! softmax weights predicted from the features (`dynamic`) or by channel
//! concatenation (`concat`), followed by a small head ending in a 1×1 conv
//! and a sigmoid.

use std::fmt;
use std::str::FromStr;

use crate::batch::{disparities_tensor, images_tensor, luma_chroma, split_batch};
use crate::error::{Error, Result};
use crate::generator::TopKVolume;
use crate::nn::{add_conv_bn, BnMode, Init, Net, ParamStore, Tape, Var};
use crate::stereo::{ConfidenceKind, ConfidenceMap, DisparityMap, Image};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Dynamic,
    Concat,
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(Fusion::Dynamic),
            "concat" => Ok(Fusion::Concat),
            other => Err(Error::invalid(format!("unknown fusion `{other}`"))),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Dynamic => "dynamic",
            Fusion::Concat => "concat",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub feat_channels: usize,
    pub fusion: Fusion,
    /// Head layers including the final 1×1 conv.
    pub head_depth: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            feat_channels: 16,
            fusion: Fusion::Dynamic,
            head_depth: 3,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feat_channels == 0 {
            return Err(Error::invalid("feat_channels must be ≥ 1"));
        }
        if self.head_depth == 0 {
            return Err(Error::invalid("head_depth must be ≥ 1"));
        }
        Ok(())
    }
}

const STACKS: [&str; 3] = ["f.cost", "f.disp", "f.img"];
const IMAGE_CHANNELS: usize = 3;

/// Per-pixel modality weights, `H×W×3` in (cost, disparity, color) order.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Creates the discriminator parameters (names prefixed `f.`) for top-K
/// inputs of width `k`.
pub fn init_discriminator_params<T: Scalar>(
    cfg: &DiscriminatorConfig,
    k: usize,
    seed: u64,
) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let f = cfg.feat_channels;
    let mut s = ParamStore::new(seed);
    for (stack, cin) in STACKS.iter().zip([k, 1, IMAGE_CHANNELS]) {
        add_conv_bn(&mut s, &format!("{stack}.0"), 3, cin, f)?;
        add_conv_bn(&mut s, &format!("{stack}.1"), 3, f, f)?;
        add_conv_bn(&mut s, &format!("{stack}.2"), 3, f, f)?;
    }
    let fused = match cfg.fusion {
        Fusion::Dynamic => {
            add_conv_bn(&mut s, "f.fuse.0", 3, 3 * f, f)?;
            s.add_conv("f.fuse.logits", 1, f, 3, Init::Zeros)?;
            f
        }
        Fusion::Concat => 3 * f,
    };
    let mut cin = fused;
    for i in 0..cfg.head_depth - 1 {
        add_conv_bn(&mut s, &format!("f.head.{i}"), 3, cin, f)?;
        cin = f;
    }
    s.add_conv("f.head.out", 1, cin, 1, Init::HeNormal)?;
    Ok(s)
}

/// Network inputs on a tape: top-K `N×H×W×k`, disparity `N×H×W×1` in
/// pixels, and the luma/chroma image `N×H×W×3`.
#[derive(Clone, Copy, Debug)]
pub struct ConfidenceInputs {
    pub topk: Var,
    pub disparity: Var,
    pub image: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ConfidenceGraph {
    pub features: [Var; 3],
    pub weights: Option<Var>,
    pub fused: Var,
    pub logits: Var,
    pub q: Var,
}

fn check_inputs<T: Scalar>(tape: &Tape<T>, inp: &ConfidenceInputs) -> Result<()> {
    let (n, h, w, _) = tape.value(inp.topk).dims4()?;
    let d = tape.value(inp.disparity).dims4()?;
    let i = tape.value(inp.image).dims4()?;
    if (d.0, d.1, d.2, d.3) != (n, h, w, 1) || (i.0, i.1, i.2) != (n, h, w) || i.3 != IMAGE_CHANNELS
    {
        return Err(Error::invalid(format!(
            "confidence inputs disagree: top-k {:?}, disparity {:?}, image {:?}",
            tape.value(inp.topk).shape(),
            tape.value(inp.disparity).shape(),
            tape.value(inp.image).shape()
        )));
    }
    Ok(())
}

/// The three per-modality feature stacks. The disparity is scaled by
/// `1/d_max` first.
pub fn extract_features<T: Scalar>(
    net: &mut Net<'_, T>,
    inp: &ConfidenceInputs,
    d_max: usize,
) -> Result<[Var; 3]> {
    check_inputs(net.tape, inp)?;
    let disp = net.tape.scale(inp.disparity, T::of(1.0 / d_max as f64));
    let mut out = [inp.topk; 3];
    for (slot, (stack, x)) in out.iter_mut().zip(STACKS.iter().zip([inp.topk, disp, inp.image])) {
        let mut y = x;
        for layer in 0..3 {
            y = net.conv_bn_relu(&format!("{stack}.{layer}"), y)?;
        }
        *slot = y;
    }
    Ok(out)
}

/// Softmax-weighted per-pixel combination of the three feature maps.
pub fn dynamic_fusion<T: Scalar>(net: &mut Net<'_, T>, feats: [Var; 3]) -> Result<(Var, Var)> {
    let cat = net.tape.concat(&feats)?;
    let h = net.conv_bn_relu("f.fuse.0", cat)?;
    let logits = net.conv("f.fuse.logits", h)?;
    let weights = net.tape.softmax(logits);
    let fused = net.tape.fuse3(weights, feats)?;
    Ok((fused, weights))
}

pub fn concat_fusion<T: Scalar>(tape: &mut Tape<T>, feats: [Var; 3]) -> Result<Var> {
    tape.concat(&feats)
}

/// Full confidence forward on a tape.
pub fn confidence_graph<T: Scalar>(
    net: &mut Net<'_, T>,
    inp: &ConfidenceInputs,
    cfg: &DiscriminatorConfig,
    d_max: usize,
) -> Result<ConfidenceGraph> {
    cfg.validate()?;
    let features = extract_features(net, inp, d_max)?;
    let (fused, weights) = match cfg.fusion {
        Fusion::Dynamic => {
            let (f, w) = dynamic_fusion(net, features)?;
            (f, Some(w))
        }
        Fusion::Concat => (concat_fusion(net.tape, features)?, None),
    };
    let mut y = fused;
    for i in 0..cfg.head_depth - 1 {
        y = net.conv_bn_relu(&format!("f.head.{i}"), y)?;
    }
    let logits = net.conv("f.head.out", y)?;
    let q = net.tape.sigmoid(logits);
    Ok(ConfidenceGraph {
        features,
        weights,
        fused,
        logits,
        q,
    })
}

/// Builds constant tape inputs from per-image maps.
pub fn constant_inputs<T: Scalar>(
    tape: &mut Tape<T>,
    topk: &[&TopKVolume],
    disparity: &[&DisparityMap],
    image: &[&Image],
) -> Result<ConfidenceInputs> {
    if topk.is_empty() || topk.len() != disparity.len() || topk.len() != image.len() {
        return Err(Error::invalid("confidence batch lists differ in length"));
    }
    let k = topk[0].k;
    let (h, w) = (topk[0].height, topk[0].width);
    let mut data = Vec::with_capacity(topk.len() * h * w * k);
    for t in topk {
        if (t.height, t.width, t.k) != (h, w, k) {
            return Err(Error::invalid("top-k volumes differ in shape"));
        }
        data.extend(t.data.iter().map(|&v| T::of(v)));
    }
    let tk = tape.constant(Tensor::from_vec(&[topk.len(), h, w, k], data)?);
    let d = tape.constant(disparities_tensor::<T>(disparity)?);
    let yc: Vec<Image> = image.iter().map(|i| luma_chroma(i)).collect();
    let refs: Vec<&Image> = yc.iter().collect();
    let im = tape.constant(images_tensor::<T>(&refs)?);
    Ok(ConfidenceInputs {
        topk: tk,
        disparity: d,
        image: im,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceOutput {
    pub q: ConfidenceMap,
    pub weights: Option<FusionWeights>,
}

/// Inference-mode confidence for one image.
pub fn confidence_forward<T: Scalar>(
    topk: &TopKVolume,
    disparity: &DisparityMap,
    image: &Image,
    params: &ParamStore<T>,
    cfg: &DiscriminatorConfig,
    d_max: usize,
) -> Result<ConfidenceOutput> {
    let mut tape = Tape::new();
    let inp = constant_inputs(&mut tape, &[topk], &[disparity], &[image])?;
    let mut net = Net::new(&mut tape, params, BnMode::Eval);
    let g = confidence_graph(&mut net, &inp, cfg, d_max)?;
    let (h, w) = (topk.height, topk.width);
    let q = ConfidenceMap::new(
        h,
        w,
        split_batch(tape.value(g.q))?.remove(0),
        ConfidenceKind::Estimated,
    )?;
    let weights = match g.weights {
        Some(wv) => Some(FusionWeights {
            height: h,
            width: w,
            data: split_batch(tape.value(wv))?.remove(0),
        }),
        None => None,
    };
    Ok(ConfidenceOutput { q, weights })
}
