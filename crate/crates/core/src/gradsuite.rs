//! The finite-difference suite over every differentiable operation and
//! both networks.
//!
//! Inputs for piecewise-smooth operations are drawn away from their kinks
//! (ReLU at zero, pooling and top-k ties, integer warp offsets, zero
//! residuals) so that central differences at `h` stay on one piece.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::discriminator::{confidence_graph, init_discriminator_params, ConfidenceInputs, DiscriminatorConfig, Fusion};
use crate::error::Result;
use crate::generator::{generator_graph, init_generator_params, GeneratorConfig};
use crate::nn::gradcheck::{check_inputs, check_params, random_tensor, relative_error, CheckReport};
use crate::nn::{BnMode, Net, ParamStore, Tape, Var, BN_EPS};
use crate::rng::substream;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const SMOOTH_TOL: f64 = 1e-5;
pub const PIECEWISE_TOL: f64 = 1e-4;
const MAX_COORDS: usize = 24;
const NET_COORDS: usize = 4;

/// Tensor holding a random permutation of evenly spaced values, so that no
/// two entries are closer than `gap`.
fn distinct_tensor(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..len).map(|i| i as f64 * gap).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape, v).expect("length matches shape")
}

/// Uniform values whose magnitude is at least `min_abs`.
fn away_from_zero(shape: &[usize], min_abs: f64, max_abs: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = random_tensor(shape, min_abs, max_abs, rng);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn projector(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Builds `r · f(inputs)` for a fixed random `r`.
fn projected<F>(
    name: &str,
    threshold: f64,
    inputs: Vec<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
    mut f: F,
) -> Result<CheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.input(t.clone())).collect();
    let out = f(&mut probe, &vars)?;
    let r = projector(probe.value(out).len(), rng);
    let coords = inputs.iter().map(|t| t.len().min(MAX_COORDS)).sum();
    let rel_err = check_inputs(
        &inputs,
        |tape, v| {
            let y = f(tape, v)?;
            tape.dot_const(y, &r)
        },
        FD_STEP,
        MAX_COORDS,
        rng,
    )?;
    Ok(CheckReport {
        name: name.to_string(),
        rel_err,
        coords,
        threshold,
    })
}

/// The masked gradient must equal the finite difference of the identity
/// forward pass times the per-pixel mask.
fn grad_mask_check(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let x = random_tensor(&[1, 2, 3, 2], -1.0, 1.0, rng);
    let (pixels, c) = (6, 2);
    let mask: Vec<f64> = (0..pixels).map(|i| (i % 2) as f64).collect();
    let r = projector(x.len(), rng);
    let eval = |x: &Tensor<f64>| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let v = tape.input(x.clone());
        let y = tape.grad_mask(v, &mask)?;
        let out = tape.dot_const(y, &r)?;
        let g = tape.backward(out)?;
        let grad = g.get(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
        Ok((tape.value(out).data()[0], grad))
    };
    let (_, analytic) = eval(&x)?;
    let mut expected = Vec::with_capacity(x.len());
    let mut work = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        work.data_mut()[i] = orig + FD_STEP;
        let fp = eval(&work)?.0;
        work.data_mut()[i] = orig - FD_STEP;
        let fm = eval(&work)?.0;
        work.data_mut()[i] = orig;
        expected.push(mask[i / c] * (fp - fm) / (2.0 * FD_STEP));
    }
    Ok(CheckReport {
        name: "grad_mask".into(),
        rel_err: relative_error(&analytic, &expected),
        coords: x.len(),
        threshold: SMOOTH_TOL,
    })
}

fn primitive_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    let x = random_tensor(&[2, 5, 4, 3], -1.0, 1.0, rng);
    let w = random_tensor(&[3, 3, 3, 2], -0.5, 0.5, rng);
    let b = random_tensor(&[2], -0.5, 0.5, rng);
    out.push(projected("conv2d", SMOOTH_TOL, vec![x.clone(), w, b], rng, |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]))
    })?);
    let w1 = random_tensor(&[1, 1, 3, 4], -0.5, 0.5, rng);
    out.push(projected("conv2d_1x1", SMOOTH_TOL, vec![x.clone(), w1], rng, |t, v| {
        t.conv2d(v[0], v[1], None)
    })?);

    let gamma = random_tensor(&[3], 0.5, 1.5, rng);
    let beta = random_tensor(&[3], -0.5, 0.5, rng);
    out.push(projected(
        "batch_norm_train",
        SMOOTH_TOL,
        vec![x.clone(), gamma.clone(), beta.clone()],
        rng,
        |t, v| t.batch_norm_train(v[0], v[1], v[2], BN_EPS).map(|(y, _)| y),
    )?);
    let mean = [0.1, -0.2, 0.3];
    let var = [0.5, 1.5, 0.9];
    out.push(projected(
        "batch_norm_eval",
        SMOOTH_TOL,
        vec![x.clone(), gamma, beta],
        rng,
        |t, v| t.batch_norm_eval(v[0], v[1], v[2], BN_EPS, &mean, &var),
    )?);

    out.push(projected(
        "relu",
        PIECEWISE_TOL,
        vec![away_from_zero(&[2, 3, 3, 2], 0.05, 1.0, rng)],
        rng,
        |t, v| Ok(t.relu(v[0])),
    )?);
    out.push(projected("sigmoid", SMOOTH_TOL, vec![random_tensor(&[2, 3, 3, 2], -3.0, 3.0, rng)], rng, |t, v| {
        Ok(t.sigmoid(v[0]))
    })?);
    out.push(projected(
        "max_pool2",
        PIECEWISE_TOL,
        vec![distinct_tensor(&[1, 4, 6, 2], 1e-2, rng)],
        rng,
        |t, v| t.max_pool2(v[0]),
    )?);
    out.push(projected("upsample2", SMOOTH_TOL, vec![random_tensor(&[1, 3, 2, 2], -1.0, 1.0, rng)], rng, |t, v| {
        t.upsample2(v[0])
    })?);
    out.push(projected(
        "concat",
        SMOOTH_TOL,
        vec![random_tensor(&[1, 2, 2, 1], -1.0, 1.0, rng), random_tensor(&[1, 2, 2, 3], -1.0, 1.0, rng)],
        rng,
        |t, v| t.concat(&[v[0], v[1]]),
    )?);
    out.push(projected(
        "linear",
        SMOOTH_TOL,
        vec![random_tensor(&[2, 3], -1.0, 1.0, rng), random_tensor(&[2, 3], -1.0, 1.0, rng)],
        rng,
        |t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.scale(a, 0.7);
            t.linear(&[(s, 1.5), (v[1], -2.0)])
        },
    )?);
    out.push(projected("softmax", SMOOTH_TOL, vec![random_tensor(&[1, 2, 3, 6], -2.0, 2.0, rng)], rng, |t, v| {
        Ok(t.softmax(v[0]))
    })?);
    out.push(projected(
        "topk",
        PIECEWISE_TOL,
        vec![distinct_tensor(&[1, 2, 2, 6], 1e-2, rng)],
        rng,
        |t, v| t.topk(v[0], 3),
    )?);
    out.push(projected(
        "soft_argmax",
        SMOOTH_TOL,
        vec![random_tensor(&[1, 2, 3, 5], 0.0, 1.0, rng)],
        rng,
        |t, v| Ok(t.soft_argmax(v[0])),
    )?);
    out.push(projected(
        "normalize_probability",
        SMOOTH_TOL,
        vec![random_tensor(&[1, 3, 3, 6], 0.0, 1.0, rng)],
        rng,
        |t, v| {
            let s = t.scale(v[0], -1.0 / 0.3);
            Ok(t.softmax(s))
        },
    )?);

    let mut disp = random_tensor(&[1, 3, 6, 1], 0.2, 0.8, rng);
    for v in disp.data_mut() {
        *v += rng.random_range(0..3) as f64;
    }
    out.push(projected(
        "bilinear_warp",
        PIECEWISE_TOL,
        vec![random_tensor(&[1, 3, 6, 2], 0.0, 1.0, rng), disp],
        rng,
        |t, v| t.warp(v[0], v[1]),
    )?);

    out.push(grad_mask_check(rng)?);

    let a = random_tensor(&[12], -1.0, 1.0, rng);
    let offset = away_from_zero(&[12], 0.05, 0.5, rng);
    let target: Vec<f64> = a.data().iter().zip(offset.data()).map(|(x, o)| x + o).collect();
    let weights: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
    out.push(projected("masked_mean_abs", PIECEWISE_TOL, vec![a], rng, |t, v| {
        t.masked_mean_abs(v[0], &target, &weights)
    })?);
    let q = random_tensor(&[10], 0.1, 0.9, rng);
    let wq: Vec<f64> = (0..10).map(|i| if i < 6 { 1.0 } else { 0.0 }).collect();
    out.push(projected("masked_mean_neg_log_pos", SMOOTH_TOL, vec![q.clone()], rng, |t, v| {
        t.masked_mean_neg_log(v[0], &wq, true, 1e-7)
    })?);
    out.push(projected("masked_mean_neg_log_neg", SMOOTH_TOL, vec![q], rng, |t, v| {
        t.masked_mean_neg_log(v[0], &wq, false, 1e-7)
    })?);

    let fw = random_tensor(&[1, 2, 2, 3], 0.0, 1.0, rng);
    let f: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&[1, 2, 2, 4], -1.0, 1.0, rng)).collect();
    out.push(projected(
        "fuse3",
        SMOOTH_TOL,
        vec![fw, f[0].clone(), f[1].clone(), f[2].clone()],
        rng,
        |t, v| t.fuse3(v[0], [v[1], v[2], v[3]]),
    )?);
    Ok(out)
}

/// Moves every trainable tensor off its initial value so that zero-init
/// layers carry gradient through the whole network.
fn jitter(store: &mut ParamStore<f64>, scale: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    for name in store.trainable_names() {
        for v in store.get_mut(&name)?.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
    Ok(())
}

fn network_checks(seed: u64, rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let (n, h, w, d) = (1, 8, 8, 6);
    let gcfg = GeneratorConfig {
        base_channels: 4,
        ..GeneratorConfig::tiny(d)
    };
    let mut g = init_generator_params::<f64>(&gcfg, seed)?;
    jitter(&mut g, 0.05, rng)?;
    let raw = random_tensor(&[n, h, w, d], 0.0, 1.0, rng);
    let r_disp = projector(n * h * w, rng);
    let r_topk = projector(n * h * w * gcfg.k, rng);
    let g_names = g.trainable_names();
    let g_coords = g_names.len() * NET_COORDS;
    let generator_objective = |tape: &mut Tape<f64>, store: &ParamStore<f64>, raw: Var| -> Result<Var> {
        let mut net = Net::new(tape, store, BnMode::Train);
        let gg = generator_graph(&mut net, raw, &gcfg)?;
        let a = tape.dot_const(gg.disparity, &r_disp)?;
        let b = tape.dot_const(gg.topk, &r_topk)?;
        tape.add(a, b)
    };
    let mut out = vec![CheckReport {
        name: "generator_params".into(),
        rel_err: check_params(
            &g,
            &g_names,
            |tape, store| {
                let x = tape.constant(raw.clone());
                generator_objective(tape, store, x)
            },
            FD_STEP,
            NET_COORDS,
            rng,
        )?,
        coords: g_coords,
        threshold: PIECEWISE_TOL,
    }];
    out.push(CheckReport {
        name: "generator_input".into(),
        rel_err: check_inputs(
            std::slice::from_ref(&raw),
            |tape, v| generator_objective(tape, &g, v[0]),
            FD_STEP,
            MAX_COORDS,
            rng,
        )?,
        coords: MAX_COORDS,
        threshold: PIECEWISE_TOL,
    });

    for fusion in [Fusion::Dynamic, Fusion::Concat] {
        let fcfg = DiscriminatorConfig {
            feat_channels: 4,
            fusion,
            ..Default::default()
        };
        let k = gcfg.k;
        let mut f = init_discriminator_params::<f64>(&fcfg, k, seed)?;
        jitter(&mut f, 0.05, rng)?;
        let topk = random_tensor(&[n, h, w, k], 0.0, 1.0, rng);
        let disp = random_tensor(&[n, h, w, 1], 0.0, (d - 1) as f64, rng);
        let img = random_tensor(&[n, h, w, 3], -0.5, 1.0, rng);
        let rq = projector(n * h * w, rng);
        let f_names = f.trainable_names();
        let objective = |tape: &mut Tape<f64>, store: &ParamStore<f64>, v: &[Var]| -> Result<Var> {
            let inp = ConfidenceInputs {
                topk: v[0],
                disparity: v[1],
                image: v[2],
            };
            let mut net = Net::new(tape, store, BnMode::Train);
            let cg = confidence_graph(&mut net, &inp, &fcfg, d)?;
            tape.dot_const(cg.q, &rq)
        };
        out.push(CheckReport {
            name: format!("discriminator_{fusion}_params"),
            rel_err: check_params(
                &f,
                &f_names,
                |tape, store| {
                    let v = [
                        tape.constant(topk.clone()),
                        tape.constant(disp.clone()),
                        tape.constant(img.clone()),
                    ];
                    objective(tape, store, &v)
                },
                FD_STEP,
                NET_COORDS,
                rng,
            )?,
            coords: f_names.len() * NET_COORDS,
            threshold: PIECEWISE_TOL,
        });
        out.push(CheckReport {
            name: format!("discriminator_{fusion}_inputs"),
            rel_err: check_inputs(
                &[topk, disp, img],
                |tape, v| objective(tape, &f, v),
                FD_STEP,
                MAX_COORDS,
                rng,
            )?,
            coords: 3 * MAX_COORDS,
            threshold: PIECEWISE_TOL,
        });
    }
    Ok(out)
}

/// Runs every check; each report carries its own threshold.
pub fn run_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = substream(seed, "gradcheck");
    let mut out = primitive_checks(&mut rng)?;
    out.extend(network_checks(seed, &mut rng)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        let mut rng = substream(3, "gradcheck");
        for r in primitive_checks(&mut rng).unwrap() {
            assert!(r.passed(), "{} rel err {:e} ≥ {:e}", r.name, r.rel_err, r.threshold);
        }
    }

    #[test]
    fn distinct_values_are_separated() {
        let mut rng = substream(0, "t");
        let t = distinct_tensor(&[10], 0.5, &mut rng);
        let mut v = t.data().to_vec();
        v.sort_by(f64::total_cmp);
        assert!(v.windows(2).all(|w| w[1] - w[0] >= 0.5 - 1e-12));
    }
}
