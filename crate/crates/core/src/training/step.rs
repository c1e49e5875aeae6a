use std::collections::BTreeMap;

use super::losses::{adv_loss_graph, conf_loss_graph, disp_loss_graph, split_masks};
use super::{Models, StepStats, TrainConfig, TrainItem};
use crate::batch::{costs_tensor, images_tensor, luma_chroma};
use crate::discriminator::{confidence_graph, ConfidenceInputs, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{generator_graph, GeneratorConfig, GeneratorGraph};
use crate::nn::{commit_updates, sgd_momentum_step, BnMode, Net, ParamStore, Tape, Var};
use crate::stereo::Image;
use crate::tensor::{Scalar, Tensor};

/// Loss selection for [`generator_gradients`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorTerm {
    Disp,
    /// `λ · loss_adv_G`.
    Adv,
    Total,
}

/// Effective per-step weights after the warmup rule.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Weights {
    pub lambda: f64,
    pub recon: f64,
    /// Reconstruction weight used when reporting `loss_disp`, so the logged
    /// value means the same thing before and after warmup.
    pub recon_report: f64,
    pub adversarial: bool,
}

impl Weights {
    pub fn for_epoch(cfg: &TrainConfig, epoch: usize) -> Self {
        if epoch <= cfg.warmup_epochs {
            Weights {
                lambda: 0.0,
                recon: 0.0,
                recon_report: cfg.recon_weight,
                adversarial: false,
            }
        } else {
            Weights {
                lambda: cfg.lambda,
                recon: cfg.recon_weight,
                recon_report: cfg.recon_weight,
                adversarial: true,
            }
        }
    }
}

/// Generator forward plus the per-pixel masks derived from its disparity.
pub(crate) struct GeneratorPass<T: Scalar> {
    pub tape: Tape<T>,
    pub graph: GeneratorGraph,
    pub image: Tensor<T>,
    pub valid: Vec<bool>,
    pub q_star: Vec<f64>,
    pub pos: Vec<T>,
    pub neg: Vec<T>,
    pub bn_updates: Vec<(String, crate::nn::BatchStats<T>)>,
}

pub(crate) fn generator_pass<T: Scalar>(
    batch: &[TrainItem],
    g: &ParamStore<T>,
    gcfg: &GeneratorConfig,
    rho: f64,
) -> Result<GeneratorPass<T>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let mut tape = Tape::new();
    let costs: Vec<_> = batch.iter().map(|b| &b.raw).collect();
    let raw = tape.constant(costs_tensor::<T>(&costs)?);
    let mut net = Net::new(&mut tape, g, BnMode::Train);
    let graph = generator_graph(&mut net, raw, gcfg)?;
    let bn_updates = net.into_updates();

    let d_est = tape.value(graph.disparity).data();
    let mut valid = Vec::with_capacity(d_est.len());
    let mut q_star = Vec::with_capacity(d_est.len());
    let mut i = 0;
    for item in batch {
        let s = &item.sample;
        for (&gd, &v) in s.gt_disparity.data.iter().zip(&s.gt_valid.data) {
            let e = d_est[i].as_f64();
            valid.push(v);
            q_star.push(if v && (e - gd).abs() < rho { 1.0 } else { 0.0 });
            i += 1;
        }
    }
    if i != d_est.len() {
        return Err(Error::shape("ground truth does not match the cost volumes"));
    }
    let (pos, neg) = split_masks::<T>(&q_star, &valid);
    let yc: Vec<Image> = batch.iter().map(|b| luma_chroma(&b.sample.left)).collect();
    let refs: Vec<&Image> = yc.iter().collect();
    let image = images_tensor::<T>(&refs)?;
    Ok(GeneratorPass {
        tape,
        graph,
        image,
        valid,
        q_star,
        pos,
        neg,
        bn_updates,
    })
}

/// One F update on detached generator outputs. Returns `(L_F, q values)`.
fn f_phase<T: Scalar>(pass: &GeneratorPass<T>, models: &mut Models<T>, cfg: &TrainConfig) -> Result<(f64, Vec<T>)> {
    let mut tape = Tape::new();
    let inp = ConfidenceInputs {
        topk: tape.constant(pass.tape.value(pass.graph.topk).clone()),
        disparity: tape.constant(pass.tape.value(pass.graph.disparity).clone()),
        image: tape.constant(pass.image.clone()),
    };
    let mut net = Net::new(&mut tape, &models.f, BnMode::Train);
    let cg = confidence_graph(&mut net, &inp, &models.fcfg, models.gcfg.d_max)?;
    let updates = net.into_updates();
    let loss = conf_loss_graph(&mut tape, cg.q, &pass.pos, &pass.neg)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("confidence loss {value}")));
    }
    let grads = tape.backward(loss)?;
    models.f.accumulate(&tape, &grads);
    commit_updates(&mut models.f, &updates)?;
    sgd_momentum_step(&mut models.f, cfg.lr * cfg.f_lr_scale, cfg.momentum)?;
    Ok((value, tape.value(cg.q).data().to_vec()))
}

pub(crate) struct GeneratorLosses {
    pub disp: Var,
    pub disp_report: Var,
    pub adv: Option<Var>,
    pub total: Var,
    pub no_valid: bool,
}

/// Builds the generator objective on the generator tape. F runs on the
/// same tape with positive pixels of its inputs detached and its parameters
/// left untouched.
pub(crate) fn generator_losses<T: Scalar>(
    pass: &mut GeneratorPass<T>,
    batch: &[TrainItem],
    f: &ParamStore<T>,
    fcfg: &DiscriminatorConfig,
    d_max: usize,
    weights: Weights,
    recon_pixels: Option<&[T]>,
) -> Result<GeneratorLosses> {
    let samples: Vec<_> = batch.iter().map(|b| &b.sample).collect();
    let tape = &mut pass.tape;
    let dl = disp_loss_graph(
        tape,
        pass.graph.disparity,
        &samples,
        weights.recon_report,
        recon_pixels,
    )?;
    let disp = match dl.recon {
        Some(r) if weights.recon != weights.recon_report => {
            tape.linear(&[(dl.supervised, T::one()), (r, T::of(weights.recon))])?
        }
        _ => dl.total,
    };
    if !weights.adversarial {
        return Ok(GeneratorLosses {
            disp,
            disp_report: dl.total,
            adv: None,
            total: disp,
            no_valid: dl.no_valid,
        });
    }
    let inp = ConfidenceInputs {
        topk: tape.grad_mask(pass.graph.topk, &pass.neg)?,
        disparity: tape.grad_mask(pass.graph.disparity, &pass.neg)?,
        image: tape.constant(pass.image.clone()),
    };
    let mut net = Net::new(tape, f, BnMode::Train);
    let cg = confidence_graph(&mut net, &inp, fcfg, d_max)?;
    let adv = adv_loss_graph(tape, cg.q, &pass.neg)?;
    let total = tape.linear(&[(disp, T::one()), (adv, T::of(weights.lambda))])?;
    Ok(GeneratorLosses {
        disp,
        disp_report: dl.total,
        adv: Some(adv),
        total,
        no_valid: dl.no_valid,
    })
}

fn recon_gate<T: Scalar>(q: &[T], rho: f64) -> Vec<T> {
    q.iter()
        .map(|&v| if v.as_f64() > rho { T::one() } else { T::zero() })
        .collect()
}

/// One alternating update: F on detached generator outputs, then G on
/// `L_disp + λ·L_adv`.
pub fn train_step<T: Scalar>(
    batch: &[TrainItem],
    models: &mut Models<T>,
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<StepStats> {
    cfg.validate()?;
    let weights = Weights::for_epoch(cfg, epoch);
    let mut pass = generator_pass(batch, &models.g, &models.gcfg, cfg.rho)?;
    let (loss_f, q_f) = f_phase(&pass, models, cfg)?;
    let gate = cfg.recon_gate.then(|| recon_gate(&q_f, cfg.rho));
    let losses = generator_losses(
        &mut pass,
        batch,
        &models.f,
        &models.fcfg,
        models.gcfg.d_max,
        weights,
        gate.as_deref(),
    )?;
    let tape = &pass.tape;
    let scalar = |v: Var| tape.value(v).data()[0].as_f64();
    let loss_disp = scalar(losses.disp_report);
    let loss_adv = losses.adv.map(scalar).unwrap_or(0.0);
    let total = scalar(losses.total);
    if !total.is_finite() || !loss_adv.is_finite() {
        return Err(Error::NonFinite(format!(
            "generator loss {total} (disp {loss_disp}, adv {loss_adv}) at epoch {epoch} step {step}"
        )));
    }
    let grads = tape.backward(losses.total)?;
    models.g.accumulate(tape, &grads);
    commit_updates(&mut models.g, &pass.bn_updates)?;
    sgd_momentum_step(&mut models.g, cfg.lr, cfg.momentum)?;
    if !models.g.all_finite() || !models.f.all_finite() {
        return Err(Error::NonFinite(format!(
            "parameters after epoch {epoch} step {step}"
        )));
    }
    let n_valid = pass.valid.iter().filter(|&&v| v).count();
    let n_pos = pass.q_star.iter().filter(|&&q| q == 1.0).count();
    Ok(StepStats {
        loss_disp,
        loss_conf_f: loss_f,
        loss_adv_g: loss_adv,
        pos_fraction: if n_valid > 0 {
            n_pos as f64 / n_valid as f64
        } else {
            0.0
        },
        no_valid: losses.no_valid,
        epoch,
        step,
    })
}

/// Gradient of one generator objective term with respect to every
/// trainable generator parameter, without updating anything.
///
/// `adversarial` selects whether the adversarial branch is built (as after
/// warmup); the configured `lambda` and `recon_weight` are used as given.
pub fn generator_gradients<T: Scalar>(
    batch: &[TrainItem],
    models: &Models<T>,
    cfg: &TrainConfig,
    term: GeneratorTerm,
    adversarial: bool,
) -> Result<BTreeMap<String, Tensor<T>>> {
    let weights = Weights {
        lambda: cfg.lambda,
        recon: cfg.recon_weight,
        recon_report: cfg.recon_weight,
        adversarial,
    };
    let mut pass = generator_pass(batch, &models.g, &models.gcfg, cfg.rho)?;
    let losses = generator_losses(
        &mut pass,
        batch,
        &models.f,
        &models.fcfg,
        models.gcfg.d_max,
        weights,
        None,
    )?;
    let tape = &mut pass.tape;
    let target = match term {
        GeneratorTerm::Disp => losses.disp,
        GeneratorTerm::Total => losses.total,
        GeneratorTerm::Adv => {
            let adv = losses
                .adv
                .ok_or_else(|| Error::invalid("adversarial term requested without the branch"))?;
            tape.scale(adv, T::of(cfg.lambda))
        }
    };
    let grads = tape.backward(target)?;
    let mut store = models.g.clone();
    store.zero_grads();
    store.accumulate(tape, &grads);
    Ok(store
        .trainable_names()
        .into_iter()
        .map(|n| {
            let g = store.entry(&n).expect("listed name").grad.clone();
            (n, g)
        })
        .collect())
}
