//! Reverse-mode tape over a small set of fused primitives.
//!
//! Every primitive records the input handles and whatever it needs for the
//! backward pass. `backward` replays the record in exact reverse order and
//! accumulates gradients additively, so a value consumed twice receives the
//! sum of both contributions.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::invalid(format!("unknown activation kind `{other}`"))),
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Linear {
        terms: Vec<(Var, T)>,
    },
    Softmax(Var),
    TopK {
        x: Var,
        src: Vec<usize>,
    },
    SoftArgmax(Var),
    Warp {
        image: Var,
        disp: Var,
    },
    GradMask {
        x: Var,
        mask: Vec<T>,
    },
    MaskedMeanAbs {
        a: Var,
        target: Vec<T>,
        weights: Vec<T>,
        denom: T,
    },
    MaskedMeanNegLog {
        q: Var,
        weights: Vec<T>,
        positive: bool,
        eps: T,
        denom: T,
    },
    Fuse3 {
        weights: Var,
        feats: [Var; 3],
    },
    DotConst {
        x: Var,
        r: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics produced by a train-mode batch norm, for the caller to
/// fold into running statistics.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of elements per channel the statistics were computed over.
    pub count: usize,
}

/// Gradients returned by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Per-axis bilinear taps for half-pixel-centered factor-2 upsampling.
fn upsample_taps<T: Scalar>(n: usize) -> Vec<(usize, usize, T)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, T::of(src - i0 as f64))
        })
        .collect()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradient (used by gradient checks and tests).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A trainable leaf bound to a parameter name.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    /// Parameter leaves recorded so far, in creation order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Replicate-padded, stride-1 cross-correlation.
    ///
    /// `x` is `N×H×W×Cin`, `w` is `k×k×Cin×Cout`, `b` is `Cout`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, h, wd, ci) = xv.dims4()?;
        let (k, cout) = match wv.shape() {
            &[k1, k2, wci, co] if k1 == k2 && wci == ci => (k1, co),
            other => {
                return Err(Error::shape(format!(
                    "conv2d weights {other:?} do not match input channels {ci}"
                )))
            }
        };
        if k % 2 == 0 {
            return Err(Error::invalid(format!("conv2d kernel size {k} must be odd")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(format!(
                    "conv2d bias {:?} does not match {cout} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let r = (k / 2) as isize;
        let xd = xv.data();
        let wdat = wv.data();
        let mut out = vec![T::zero(); n * h * wd * cout];
        for bi in 0..n {
            for y in 0..h {
                for xx in 0..wd {
                    let o0 = ((bi * h + y) * wd + xx) * cout;
                    let opx = &mut out[o0..o0 + cout];
                    if let Some(b) = b {
                        opx.copy_from_slice(self.nodes[b.0].value.data());
                    }
                    for ky in 0..k {
                        let yy = (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                        for kx in 0..k {
                            let xs =
                                (xx as isize + kx as isize - r).clamp(0, wd as isize - 1) as usize;
                            let i0 = ((bi * h + yy) * wd + xs) * ci;
                            let ipx = &xd[i0..i0 + ci];
                            let wb = (ky * k + kx) * ci * cout;
                            for (c, &v) in ipx.iter().enumerate() {
                                let wrow = &wdat[wb + c * cout..wb + (c + 1) * cout];
                                for (o, &wv) in opx.iter_mut().zip(wrow) {
                                    *o += v * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, h, wd, cout], out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(value, Op::Conv2d { x, w, b }, ng))
    }

    /// Batch norm with batch statistics over `N×H×W` per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let m = xv.len() / c.max(1);
        if xv.is_empty() || m == 0 {
            return Err(Error::invalid("batch norm over an empty batch"));
        }
        let mut mean = vec![T::zero(); c];
        for px in xv.data().chunks_exact(c) {
            for (s, &v) in mean.iter_mut().zip(px) {
                *s += v;
            }
        }
        let mf = T::of(m as f64);
        mean.iter_mut().for_each(|s| *s = *s / mf);
        let mut var = vec![T::zero(); c];
        for px in xv.data().chunks_exact(c) {
            for ((s, &v), &mu) in var.iter_mut().zip(px).zip(&mean) {
                let d = v - mu;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s = *s / mf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var,
            count: m,
        };
        let v = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((v, stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mean: &[T],
        var: &[T],
    ) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(x).is_empty() {
            return Err(Error::invalid("batch norm over an empty batch"));
        }
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch norm running statistics width"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false)
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        if g.len() != c || bt.len() != c {
            return Err(Error::shape(format!(
                "batch norm affine width {} / {} vs {c} channels",
                g.len(),
                bt.len()
            )));
        }
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for px in xv.data().chunks_exact(c) {
            for ch in 0..c {
                let xh = (px[ch] - mean[ch]) * inv_std[ch];
                xhat.push(xh);
                out.push(g[ch] * xh + bt[ch]);
            }
        }
        let value = Tensor::from_vec(xv.shape(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        let ng = self.ng(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    /// 2×2 non-overlapping max pooling; ties route to the first element in
    /// row-major block order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, h, w, c) = xv.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!(
                "max_pool2 needs even spatial dims, got {h}×{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = xv.data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best_i = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
                        let mut best = xd[best_i];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                        out.push(best);
                        argmax.push(best_i);
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, oh, ow, c], out)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, ng))
    }

    /// Factor-2 bilinear upsampling with half-pixel-centered sampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, h, w, c) = xv.dims4()?;
        let ty = upsample_taps::<T>(h);
        let tx = upsample_taps::<T>(w);
        let xd = xv.data();
        let mut out = vec![T::zero(); n * 4 * h * w * c];
        for b in 0..n {
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let o = ((b * 2 * h + oy) * 2 * w + ox) * c;
                    let taps = [
                        (y0, x0, (T::one() - fy) * (T::one() - fx)),
                        (y0, x1, (T::one() - fy) * fx),
                        (y1, x0, fy * (T::one() - fx)),
                        (y1, x1, fy * fx),
                    ];
                    for (yy, xx, wt) in taps {
                        let i = ((b * h + yy) * w + xx) * c;
                        for ch in 0..c {
                            out[o + ch] += wt * xd[i + ch];
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, 2 * h, 2 * w, c], out)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Upsample2 { x }, ng))
    }

    /// Concatenates along the channel (last) axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let lead: Vec<usize> = {
            let s = self.value(inputs[0]).shape();
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(format!("concat: {:?} vs leading {lead:?}", s)));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let npx: usize = lead.iter().product();
        let mut out = Vec::with_capacity(npx * total);
        for p in 0..npx {
            for (&v, &wd) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[p * wd..(p + 1) * wd]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::from_vec(&shape, out)?;
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            ng,
        ))
    }

    /// `Σ coeff·term` over same-shaped values.
    pub fn linear(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::invalid("linear combination of zero terms"))?;
        let mut out = Tensor::zeros(self.value(first.0).shape());
        for &(v, c) in terms {
            same_shape(&out, self.value(v), "linear combination")?;
            for (o, &x) in out.data_mut().iter_mut().zip(self.nodes[v.0].value.data()) {
                *o += c * x;
            }
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(
            out,
            Op::Linear {
                terms: terms.to_vec(),
            },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear(&[(a, T::one()), (b, T::one())])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.linear(&[(x, s)]).expect("single-term combination")
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut s = T::zero();
            for &v in row {
                let e = (v - m).exp();
                s += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e = *e / s);
        }
        let value = Tensor::from_vec(xv.shape(), out).expect("same length");
        let ng = self.ng(x);
        self.push(value, Op::Softmax(x), ng)
    }

    /// The `k` largest entries of the last axis, in descending order.
    /// Equal values keep their original order.
    pub fn topk(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if k == 0 || k > d {
            return Err(Error::invalid(format!("top-k with k={k} over {d} entries")));
        }
        let rows = xv.len() / d;
        let mut out = Vec::with_capacity(rows * k);
        let mut src = Vec::with_capacity(rows * k);
        let mut order: Vec<usize> = Vec::with_capacity(d);
        for (r, row) in xv.data().chunks_exact(d).enumerate() {
            order.clear();
            order.extend(0..d);
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
            for &i in &order[..k] {
                out.push(row[i]);
                src.push(r * d + i);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = k;
        let value = Tensor::from_vec(&shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::TopK { x, src }, ng))
    }

    /// Expectation of the candidate index `0..D` under the last axis.
    pub fn soft_argmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let out: Vec<T> = xv
            .data()
            .chunks_exact(d)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(T::zero(), |acc, (i, &p)| acc + T::of(i as f64) * p)
            })
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let value = Tensor::from_vec(&shape, out).expect("one value per row");
        let ng = self.ng(x);
        self.push(value, Op::SoftArgmax(x), ng)
    }

    /// Samples `image` at `(x − disp, y)` with linear interpolation along x,
    /// the source column clamped to `[0, W−1]`.
    pub fn warp(&mut self, image: Var, disp: Var) -> Result<Var> {
        let iv = self.value(image);
        let (n, h, w, c) = iv.dims4()?;
        let dv = self.value(disp);
        if dv.shape() != [n, h, w, 1] {
            return Err(Error::shape(format!(
                "warp disparity {:?} vs image {:?}",
                dv.shape(),
                iv.shape()
            )));
        }
        let id = iv.data();
        let mut out = Vec::with_capacity(iv.len());
        for (p, &d) in dv.data().iter().enumerate() {
            let row = p / w;
            let x = p % w;
            let (x0, x1, f, _) = warp_tap(x, d, w);
            let base = row * w;
            for ch in 0..c {
                let a = id[(base + x0) * c + ch];
                let b = id[(base + x1) * c + ch];
                out.push(a + f * (b - a));
            }
        }
        let value = Tensor::from_vec(&[n, h, w, c], out)?;
        let ng = self.ng(image) || self.ng(disp);
        Ok(self.push(value, Op::Warp { image, disp }, ng))
    }

    /// Identity forward; backward multiplies the incoming gradient by a
    /// per-pixel mask (broadcast over the last axis). A zero mask entry
    /// detaches that pixel.
    pub fn grad_mask(&mut self, x: Var, mask: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() * xv.last_dim() != xv.len() {
            return Err(Error::shape(format!(
                "gradient mask of {} pixels for {:?}",
                mask.len(),
                xv.shape()
            )));
        }
        let value = xv.clone();
        let ng = self.ng(x) && mask.iter().any(|&m| m != T::zero());
        Ok(self.push(
            value,
            Op::GradMask {
                x,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    /// `Σ wᵢ|aᵢ − tᵢ| / Σ wᵢ`, or 0 when all weights vanish.
    pub fn masked_mean_abs(&mut self, a: Var, target: &[T], weights: &[T]) -> Result<Var> {
        let av = self.value(a);
        if target.len() != av.len() || weights.len() != av.len() {
            return Err(Error::shape("masked mean abs operand lengths"));
        }
        let denom: T = weights.iter().copied().sum();
        let value = if denom > T::zero() {
            av.data()
                .iter()
                .zip(target)
                .zip(weights)
                .map(|((&x, &t), &w)| w * (x - t).abs())
                .sum::<T>()
                / denom
        } else {
            T::zero()
        };
        let ng = self.ng(a) && denom > T::zero();
        Ok(self.push(
            Tensor::scalar(value),
            Op::MaskedMeanAbs {
                a,
                target: target.to_vec(),
                weights: weights.to_vec(),
                denom,
            },
            ng,
        ))
    }

    /// `−Σ wᵢ log(qᵢ) / Σ wᵢ` (positive) or `−Σ wᵢ log(1 − qᵢ) / Σ wᵢ`
    /// (negative), with `q` clamped to `[eps, 1 − eps]`; 0 for empty sets.
    pub fn masked_mean_neg_log(
        &mut self,
        q: Var,
        weights: &[T],
        positive: bool,
        eps: T,
    ) -> Result<Var> {
        let qv = self.value(q);
        if weights.len() != qv.len() {
            return Err(Error::shape("masked log-loss weight length"));
        }
        let denom: T = weights.iter().copied().sum();
        let value = if denom > T::zero() {
            let lo = eps;
            let hi = T::one() - eps;
            qv.data()
                .iter()
                .zip(weights)
                .filter(|(_, &w)| w != T::zero())
                .map(|(&x, &w)| {
                    let c = x.max(lo).min(hi);
                    let l = if positive { c.ln() } else { (T::one() - c).ln() };
                    -w * l
                })
                .sum::<T>()
                / denom
        } else {
            T::zero()
        };
        let ng = self.ng(q) && denom > T::zero();
        Ok(self.push(
            Tensor::scalar(value),
            Op::MaskedMeanNegLog {
                q,
                weights: weights.to_vec(),
                positive,
                eps,
                denom,
            },
            ng,
        ))
    }

    /// `Σₘ weights[..., m] · feats[m]` with per-pixel scalar weights.
    pub fn fuse3(&mut self, weights: Var, feats: [Var; 3]) -> Result<Var> {
        let wv = self.value(weights);
        let f0 = self.value(feats[0]);
        let c = f0.last_dim();
        for &f in &feats[1..] {
            same_shape(f0, self.value(f), "fusion features")?;
        }
        if wv.last_dim() != 3 || wv.len() / 3 != f0.len() / c {
            return Err(Error::shape(format!(
                "fusion weights {:?} vs features {:?}",
                wv.shape(),
                f0.shape()
            )));
        }
        let mut out = vec![T::zero(); f0.len()];
        for (m, &f) in feats.iter().enumerate() {
            let fd = self.value(f).data();
            for (p, wrow) in wv.data().chunks_exact(3).enumerate() {
                let wm = wrow[m];
                for ch in 0..c {
                    out[p * c + ch] += wm * fd[p * c + ch];
                }
            }
        }
        let value = Tensor::from_vec(f0.shape(), out)?;
        let ng = self.ng(weights) || feats.iter().any(|&f| self.ng(f));
        Ok(self.push(value, Op::Fuse3 { weights, feats }, ng))
    }

    /// `Σ rᵢ xᵢ` for a constant vector `r`.
    pub fn dot_const(&mut self, x: Var, r: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if r.len() != xv.len() {
            return Err(Error::shape("dot_const length"));
        }
        let value: T = xv.data().iter().zip(r).map(|(&a, &b)| a * b).sum();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::scalar(value),
            Op::DotConst { x, r: r.to_vec() },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_op(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(shape))
                .data_mut(),
        )
    }

    fn backward_op(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => self.conv2d_backward(*x, *w, *b, gd, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let m = xhat.len() / c;
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (gp, xp) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_g[ch] += gp[ch];
                        sum_gx[ch] += gp[ch] * xp[ch];
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (a, &s) in gg.iter_mut().zip(&sum_gx) {
                        *a += s;
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for (a, &s) in gb.iter_mut().zip(&sum_g) {
                        *a += s;
                    }
                }
                let gamma_v = self.value(*gamma).data().to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    let mf = T::of(m as f64);
                    for ((gxp, gp), xp) in gx
                        .chunks_exact_mut(c)
                        .zip(gd.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                    {
                        for ch in 0..c {
                            let scale = gamma_v[ch] * inv_std[ch];
                            if *batch_stats {
                                gxp[ch] += scale / mf
                                    * (mf * gp[ch] - sum_g[ch] - xp[ch] * sum_gx[ch]);
                            } else {
                                gxp[ch] += scale * gp[ch];
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((a, &gv), &v) in gx.iter_mut().zip(gd).zip(xv) {
                        if v > T::zero() {
                            *a += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((a, &gv), &y) in gx.iter_mut().zip(gd).zip(yv) {
                        *a += gv * y * (T::one() - y);
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (&gv, &i) in gd.iter().zip(argmax) {
                        gx[i] += gv;
                    }
                }
            }
            Op::Upsample2 { x } => {
                let (n, h, w, c) = self.value(*x).dims4().expect("4-d");
                let ty = upsample_taps::<T>(h);
                let tx = upsample_taps::<T>(w);
                if let Some(gx) = self.slot(grads, *x) {
                    for b in 0..n {
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let o = ((b * 2 * h + oy) * 2 * w + ox) * c;
                                let taps = [
                                    (y0, x0, (T::one() - fy) * (T::one() - fx)),
                                    (y0, x1, (T::one() - fy) * fx),
                                    (y1, x0, fy * (T::one() - fx)),
                                    (y1, x1, fy * fx),
                                ];
                                for (yy, xx, wt) in taps {
                                    let i = ((b * h + yy) * w + xx) * c;
                                    for ch in 0..c {
                                        gx[i + ch] += wt * gd[o + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs } => {
                let total = node.value.last_dim();
                let mut off = 0;
                for &v in inputs {
                    let wd = self.value(v).last_dim();
                    if let Some(gx) = self.slot(grads, v) {
                        for (p, gp) in gd.chunks_exact(total).enumerate() {
                            for ch in 0..wd {
                                gx[p * wd + ch] += gp[off + ch];
                            }
                        }
                    }
                    off += wd;
                }
            }
            Op::Linear { terms } => {
                for &(v, coeff) in terms {
                    if let Some(gx) = self.slot(grads, v) {
                        for (a, &gv) in gx.iter_mut().zip(gd) {
                            *a += coeff * gv;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((gxr, gr), yr) in gx
                        .chunks_exact_mut(d)
                        .zip(gd.chunks_exact(d))
                        .zip(y.chunks_exact(d))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for i in 0..d {
                            gxr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                }
            }
            Op::TopK { x, src } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (&gv, &i) in gd.iter().zip(src) {
                        gx[i] += gv;
                    }
                }
            }
            Op::SoftArgmax(x) => {
                let d = self.value(*x).last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for (gxr, &gv) in gx.chunks_exact_mut(d).zip(gd) {
                        for (i, a) in gxr.iter_mut().enumerate() {
                            *a += gv * T::of(i as f64);
                        }
                    }
                }
            }
            Op::Warp { image, disp } => {
                let (_, _, w, c) = self.value(*image).dims4().expect("4-d");
                let dv = self.value(*disp).data();
                let id = self.value(*image).data();
                if let Some(gdisp) = self.slot(grads, *disp) {
                    for (p, &d) in dv.iter().enumerate() {
                        let (x0, x1, _, inside) = warp_tap(p % w, d, w);
                        if !inside {
                            continue;
                        }
                        let base = (p / w) * w;
                        let mut acc = T::zero();
                        for ch in 0..c {
                            let a = id[(base + x0) * c + ch];
                            let b = id[(base + x1) * c + ch];
                            acc += gd[p * c + ch] * (b - a);
                        }
                        gdisp[p] -= acc;
                    }
                }
                if let Some(gimg) = self.slot(grads, *image) {
                    for (p, &d) in dv.iter().enumerate() {
                        let (x0, x1, f, _) = warp_tap(p % w, d, w);
                        let base = (p / w) * w;
                        for ch in 0..c {
                            let gv = gd[p * c + ch];
                            gimg[(base + x0) * c + ch] += (T::one() - f) * gv;
                            gimg[(base + x1) * c + ch] += f * gv;
                        }
                    }
                }
            }
            Op::GradMask { x, mask } => {
                let d = node.value.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((gxr, gr), &m) in gx.chunks_exact_mut(d).zip(gd.chunks_exact(d)).zip(mask)
                    {
                        if m == T::zero() {
                            continue;
                        }
                        for (a, &gv) in gxr.iter_mut().zip(gr) {
                            *a += m * gv;
                        }
                    }
                }
            }
            Op::MaskedMeanAbs {
                a,
                target,
                weights,
                denom,
            } => {
                let av = self.value(*a).data();
                let scale = gd[0] / *denom;
                if let Some(ga) = self.slot(grads, *a) {
                    for (((gx, &x), &t), &w) in ga.iter_mut().zip(av).zip(target).zip(weights) {
                        let diff = x - t;
                        let sign = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *gx += scale * w * sign;
                    }
                }
            }
            Op::MaskedMeanNegLog {
                q,
                weights,
                positive,
                eps,
                denom,
            } => {
                let qv = self.value(*q).data();
                let scale = gd[0] / *denom;
                let lo = *eps;
                let hi = T::one() - *eps;
                if let Some(gq) = self.slot(grads, *q) {
                    for ((gx, &x), &w) in gq.iter_mut().zip(qv).zip(weights) {
                        if w == T::zero() || x < lo || x > hi {
                            continue;
                        }
                        if *positive {
                            *gx -= scale * w / x;
                        } else {
                            *gx += scale * w / (T::one() - x);
                        }
                    }
                }
            }
            Op::Fuse3 { weights, feats } => {
                let c = node.value.last_dim();
                let wv = self.value(*weights).data();
                if let Some(gw) = self.slot(grads, *weights) {
                    for (m, &f) in feats.iter().enumerate() {
                        let fd = self.value(f).data();
                        for (p, gw_row) in gw.chunks_exact_mut(3).enumerate() {
                            let mut acc = T::zero();
                            for ch in 0..c {
                                acc += gd[p * c + ch] * fd[p * c + ch];
                            }
                            gw_row[m] += acc;
                        }
                    }
                }
                for (m, &f) in feats.iter().enumerate() {
                    if let Some(gf) = self.slot(grads, f) {
                        for (p, wrow) in wv.chunks_exact(3).enumerate() {
                            let wm = wrow[m];
                            for ch in 0..c {
                                gf[p * c + ch] += wm * gd[p * c + ch];
                            }
                        }
                    }
                }
            }
            Op::DotConst { x, r } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (a, &rv) in gx.iter_mut().zip(r) {
                        *a += gd[0] * rv;
                    }
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, h, wd, ci) = xv.dims4().expect("4-d");
        let k = wv.shape()[0];
        let cout = wv.shape()[3];
        let r = (k / 2) as isize;

        if let Some(b) = b {
            if let Some(gb) = self.slot(grads, b) {
                for gp in gd.chunks_exact(cout) {
                    for (a, &v) in gb.iter_mut().zip(gp) {
                        *a += v;
                    }
                }
            }
        }

        let xd = xv.data();
        if let Some(gw) = self.slot(grads, w) {
            for bi in 0..n {
                for y in 0..h {
                    for xx in 0..wd {
                        let o0 = ((bi * h + y) * wd + xx) * cout;
                        let gpx = &gd[o0..o0 + cout];
                        for ky in 0..k {
                            let yy =
                                (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                            for kx in 0..k {
                                let xs = (xx as isize + kx as isize - r)
                                    .clamp(0, wd as isize - 1)
                                    as usize;
                                let i0 = ((bi * h + yy) * wd + xs) * ci;
                                let wb = (ky * k + kx) * ci * cout;
                                for (c, &v) in xd[i0..i0 + ci].iter().enumerate() {
                                    let row = &mut gw[wb + c * cout..wb + (c + 1) * cout];
                                    for (a, &gv) in row.iter_mut().zip(gpx) {
                                        *a += v * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        if self.ng(x) {
            // transpose to k×k×Cout×Cin so the input-gradient update is a
            // contiguous axpy over Cin
            let wdat = wv.data();
            let mut wt = vec![T::zero(); wdat.len()];
            for tap in 0..k * k {
                for c in 0..ci {
                    for o in 0..cout {
                        wt[(tap * cout + o) * ci + c] = wdat[(tap * ci + c) * cout + o];
                    }
                }
            }
            let gx = self.slot(grads, x).expect("needs grad");
            for bi in 0..n {
                for y in 0..h {
                    for xx in 0..wd {
                        let o0 = ((bi * h + y) * wd + xx) * cout;
                        let gpx = &gd[o0..o0 + cout];
                        for ky in 0..k {
                            let yy =
                                (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                            for kx in 0..k {
                                let xs = (xx as isize + kx as isize - r)
                                    .clamp(0, wd as isize - 1)
                                    as usize;
                                let i0 = ((bi * h + yy) * wd + xs) * ci;
                                let gin = &mut gx[i0..i0 + ci];
                                let tb = (ky * k + kx) * cout * ci;
                                for (o, &gv) in gpx.iter().enumerate() {
                                    let row = &wt[tb + o * ci..tb + (o + 1) * ci];
                                    for (a, &wv) in gin.iter_mut().zip(row) {
                                        *a += gv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Source taps `(x0, x1, frac, inside)` for sampling column `x − d` of a row
/// of width `w`. `inside` is false when the coordinate was clamped.
#[inline]
pub(crate) fn warp_tap<T: Scalar>(x: usize, d: T, w: usize) -> (usize, usize, T, bool) {
    let max = T::of((w - 1) as f64);
    let raw = T::of(x as f64) - d;
    let inside = raw >= T::zero() && raw <= max;
    let xs = raw.max(T::zero()).min(max);
    let x0f = xs.floor();
    let x0 = x0f.as_f64() as usize;
    let x1 = (x0 + 1).min(w - 1);
    (x0, x1, xs - x0f, inside)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_ones_on_constant_image() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled(&[1, 4, 5, 1], 0.3));
        let w = tape.constant(Tensor::filled(&[3, 3, 1, 1], 1.0));
        let y = tape.conv2d(x, w, None).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 2.7).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_even_kernel_and_bad_channels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 4, 2]));
        let w = tape.constant(Tensor::zeros(&[2, 2, 2, 1]));
        assert!(matches!(tape.conv2d(x, w, None), Err(Error::InvalidArgument(_))));
        let w = tape.constant(Tensor::zeros(&[3, 3, 3, 1]));
        assert!(matches!(tape.conv2d(x, w, None), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_norm_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let x = tape.constant(Tensor::filled(&[2, 2, 2, 1], 3.5));
        let (y, _) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let x = tape.constant(t(&[1, 1, 2, 1], &[-1.0, 1.0]));
        let (y, stats) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        let e = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(y).data()[0] + e).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - e).abs() < 1e-15);
        assert_eq!(stats.mean, vec![0.0]);
        assert_eq!(stats.var, vec![1.0]);
    }

    #[test]
    fn batch_norm_rejects_empty_batch() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let x = tape.constant(Tensor::zeros(&[0, 2, 2, 1]));
        assert!(matches!(
            tape.batch_norm_train(x, g, b, 1e-5),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn activations() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-2.0, 3.0, 0.0]));
        let r = tape.activation(x, "relu".parse().unwrap());
        assert_eq!(tape.value(r).data(), &[0.0, 3.0, 0.0]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[2], 0.5);
        assert!("tanh".parse::<Activation>().is_err());
    }

    #[test]
    fn relu_subgradient_zero_at_kink() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[2], &[0.0, 1.0]));
        let r = tape.relu(x);
        let l = tape.dot_const(r, &[1.0, 1.0]).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn max_pool_values_and_tie_routing() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let x = tape.input(Tensor::filled(&[1, 2, 2, 1], 7.0));
        let y = tape.max_pool2(x).unwrap();
        let l = tape.dot_const(y, &[1.0]).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);

        let x = tape.input(Tensor::zeros(&[1, 3, 2, 1]));
        assert!(matches!(tape.max_pool2(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn upsample_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[2.5]));
        let y = tape.upsample2(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2, 1]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));

        let x = tape.constant(t(&[1, 1, 2, 1], &[1.0, 3.0]));
        let y = tape.upsample2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.5, 2.5, 3.0, 1.0, 1.5, 2.5, 3.0]);
    }

    #[test]
    fn warp_formula() {
        let row = [10.0, 20.0, 30.0];
        let mut tape = Tape::<f64>::new();
        let img = tape.constant(t(&[1, 1, 3, 1], &row));
        let d = tape.constant(t(&[1, 1, 3, 1], &[1.0, 1.0, 1.0]));
        let y = tape.warp(img, d).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 10.0, 20.0]);
        let d = tape.constant(t(&[1, 1, 3, 1], &[0.0, 0.5, 0.0]));
        let y = tape.warp(img, d).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 15.0, 30.0]);
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[2], &[1.0, 2.0]));
        let y = tape.linear(&[(x, 2.0), (x, 3.0)]).unwrap();
        let l = tape.dot_const(y, &[1.0, -1.0]).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0, -5.0]);
    }

    #[test]
    fn grad_mask_detaches_zero_pixels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.grad_mask(x, &[0.0, 1.0]).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let l = tape.dot_const(y, &[1.0; 4]).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn masked_losses_empty_sets_are_zero() {
        let mut tape = Tape::<f64>::new();
        let q = tape.input(t(&[2], &[0.3, 0.6]));
        let l = tape.masked_mean_neg_log(q, &[0.0, 0.0], true, 1e-7).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
        let g = tape.backward(l).unwrap();
        assert!(g.get(q).is_none());
        let a = tape.masked_mean_abs(q, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(tape.value(a).data(), &[0.0]);
    }
}
