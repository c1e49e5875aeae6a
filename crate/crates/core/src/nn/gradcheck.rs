//! Central finite-difference checks of taped gradients.
//!
//! Scalar objectives are formed either by the caller or by projecting an
//! output onto a fixed random vector. The reported error is
//! `‖g_fd − g_tape‖ / max(‖g_fd‖, ‖g_tape‖)` over the sampled coordinates.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub rel_err: f64,
    pub coords: usize,
    pub threshold: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.rel_err.is_finite() && self.rel_err < self.threshold
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn pick(len: usize, max_coords: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max_coords {
        (0..len).collect()
    } else {
        let mut idx = sample(rng, len, max_coords).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Random tensor with entries uniform in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect())
        .expect("length matches shape")
}

/// Checks the gradient of `build` (which must return a scalar) with respect
/// to every tensor in `inputs`, sampling up to `max_coords` coordinates per
/// input.
pub fn check_inputs<F>(
    inputs: &[Tensor<f64>],
    mut build: F,
    h: f64,
    max_coords: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut run = |vals: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let value = tape.value(out).data()[0];
        let mut grads = Vec::new();
        if want_grad {
            let g = tape.backward(out)?;
            for (v, t) in vars.iter().zip(vals) {
                grads.push(g.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())));
            }
        }
        Ok((value, grads))
    };

    let (_, grads) = run(inputs, true)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for i in pick(t.len(), max_coords, rng) {
            let orig = t.data()[i];
            work[ti].data_mut()[i] = orig + h;
            let (fp, _) = run(&work, false)?;
            work[ti].data_mut()[i] = orig - h;
            let (fm, _) = run(&work, false)?;
            work[ti].data_mut()[i] = orig;
            numeric.push((fp - fm) / (2.0 * h));
            analytic.push(grads[ti].data()[i]);
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Checks gradients of a scalar objective with respect to the named
/// trainable parameters of `store`.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    names: &[String],
    mut build: F,
    h: f64,
    max_coords: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let mut acc = store.clone();
    acc.zero_grads();
    acc.accumulate(&tape, &grads);

    let mut work = store.clone();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for name in names {
        let len = store.get(name)?.len();
        for i in pick(len, max_coords, rng) {
            let orig = store.get(name)?.data()[i];
            let mut eval = |v: f64, work: &mut ParamStore<f64>| -> Result<f64> {
                work.get_mut(name)?.data_mut()[i] = v;
                let mut tape = Tape::new();
                let out = build(&mut tape, work)?;
                Ok(tape.value(out).data()[0])
            };
            let fp = eval(orig + h, &mut work)?;
            let fm = eval(orig - h, &mut work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            numeric.push((fp - fm) / (2.0 * h));
            analytic.push(acc.entry(name)?.grad.data()[i]);
        }
    }
    Ok(relative_error(&analytic, &numeric))
}
