//! The subcommands. Each reads its inputs from the run configuration and
//! writes its artifacts under the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use advstereo::agcp::refine_detailed;
use advstereo::gradsuite::run_suite;
use advstereo::io::{
    load_dataset, read_confidence_pfm, read_disparity_pfm, sample_dir, save_sample,
    write_confidence_pfm, write_disparity_pfm, write_gray_png, write_pfm, FloatMap,
};
use advstereo::metrics::{bad_flags, sparsification_from_flags};
use advstereo::pipeline::{evaluate, infer, report_csv, ImageMetrics, REPORT_COLUMNS};
use advstereo::stereo::{
    census_sgm_cost, ground_truth_confidence, synth_dataset, wta_disparity, ConfidenceKind,
    ConfidenceMap, DisparityMap, StereoSample,
};
use advstereo::training::{
    epoch_csv, epoch_means, latest_epoch, load_latest, prepare_items, read_stats_csv,
    train_loop, Models, STATS_FILE,
};
use anyhow::{bail, Context, Result};

use crate::config::RunConfig;
use crate::plot::{self, Series};

/// Network precision used by the command line.
pub type Real = f32;

type Dataset = Vec<(String, StereoSample)>;

fn dataset(cfg: &RunConfig) -> Result<(Dataset, usize)> {
    let root = cfg.path("data.dir")?;
    let data = load_dataset(&root).with_context(|| format!("loading dataset {}", root.display()))?;
    let d_max = data[0].1.d_max;
    if let Some((name, s)) = data.iter().find(|(_, s)| s.d_max != d_max) {
        bail!("sample {name} has d_max {} but {} was expected", s.d_max, d_max);
    }
    Ok((data, d_max))
}

/// Loads an epoch directory, or the latest epoch of a training output.
pub fn load_models(path: &Path) -> Result<Models<Real>> {
    if path.join("state.txt").exists() {
        return Ok(Models::load(path)?);
    }
    load_latest(path)?.with_context(|| format!("no checkpoint under {}", path.display()))
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let samples = synth_dataset(
        cfg.seed(),
        cfg.usize("synth.count")?,
        cfg.usize("synth.height")?,
        cfg.usize("synth.width")?,
        cfg.usize("synth.d_max")?,
        cfg.usize("synth.layers")?,
    )?;
    for (i, s) in samples.iter().enumerate() {
        save_sample(&sample_dir(out, i), s)?;
    }
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (data, d_max) = dataset(cfg)?;
    let tcfg = cfg.train()?;
    let (gcfg, fcfg) = (cfg.generator(d_max)?, cfg.discriminator()?);
    let resumed = if cfg.bool("train.resume") {
        load_latest::<Real>(out)?
    } else {
        if latest_epoch(out)?.is_some() {
            bail!("{} already holds checkpoints and train.resume=false", out.display());
        }
        None
    };
    let mut models = match resumed {
        Some(m) => {
            if m.gcfg != gcfg || m.fcfg != fcfg {
                bail!("checkpoint architecture differs from the configuration");
            }
            eprintln!("resuming after epoch {}", m.epoch);
            m
        }
        None => Models::init(gcfg, fcfg, cfg.seed())?,
    };
    let samples: Vec<StereoSample> = data.into_iter().map(|(_, s)| s).collect();
    let items = prepare_items(&samples)?;
    train_loop(&items, &mut models, &tcfg, Some(out))?;
    let summaries = epoch_means(&read_stats_csv(&out.join(STATS_FILE))?);
    fs::write(out.join("epochs.csv"), epoch_csv(&summaries))?;
    if let Some(last) = summaries.last() {
        println!(
            "epoch {}: loss_disp {:.6} loss_conf_F {:.6} loss_adv_G {:.6}",
            last.epoch, last.loss_disp, last.loss_conf_f, last.loss_adv_g
        );
    }
    Ok(())
}

fn write_plane(path: &Path, height: usize, width: usize, data: impl Iterator<Item = f64>) -> Result<()> {
    let map = FloatMap {
        height,
        width,
        data: data.map(|v| v as f32).collect(),
    };
    Ok(write_pfm(path, &map)?)
}

pub fn infer_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (data, _) = dataset(cfg)?;
    let models = load_models(&cfg.path("model.checkpoint")?)?;
    for (name, s) in &data {
        let inf = infer(s, &models)?;
        let dir = out.join(name);
        fs::create_dir_all(&dir)?;
        write_disparity_pfm(&dir.join("disparity.pfm"), &inf.disparity)?;
        write_confidence_pfm(&dir.join("confidence.pfm"), &inf.confidence)?;
        if let Some(w) = &inf.weights {
            for (c, label) in ["cost", "disp", "img"].iter().enumerate() {
                let plane = w.data.iter().skip(c).step_by(3).copied();
                write_plane(&dir.join(format!("weight_{label}.pfm")), w.height, w.width, plane)?;
            }
        }
    }
    println!("wrote predictions for {} samples to {}", data.len(), out.display());
    Ok(())
}

/// Disparity and confidence for one sample as selected by `pred.*`.
fn prediction(
    cfg: &RunConfig,
    name: &str,
    s: &StereoSample,
    models: Option<&Models<Real>>,
) -> Result<(DisparityMap, ConfidenceMap)> {
    let (d, learned) = match cfg.get("pred.source") {
        "predictions" => {
            let dir = cfg.path("pred.dir")?.join(name);
            let d = read_disparity_pfm(&dir.join("disparity.pfm"))
                .with_context(|| format!("reading predictions of {name}"))?;
            let q = dir.join("confidence.pfm");
            let q = if q.exists() {
                Some(read_confidence_pfm(&q, ConfidenceKind::Estimated)?)
            } else {
                None
            };
            (d, q)
        }
        "model" => {
            let inf = infer(s, models.expect("models loaded for the model source"))?;
            (inf.disparity, Some(inf.confidence))
        }
        _ => (wta_disparity(&census_sgm_cost(s)?), None),
    };
    let q = match cfg.get("pred.confidence") {
        "learned" => learned.with_context(|| {
            format!("no learned confidence for {name}; pick pred.confidence=ground_truth or constant")
        })?,
        "ground_truth" => ground_truth_confidence(&d, &s.gt_disparity, &s.gt_valid, cfg.f64("eval.rho"))?,
        _ => ConfidenceMap::constant(d.height, d.width, 0.5),
    };
    Ok((d, q))
}

fn models_for_source(cfg: &RunConfig) -> Result<Option<Models<Real>>> {
    if cfg.get("pred.source") == "model" {
        Ok(Some(load_models(&cfg.path("model.checkpoint")?)?))
    } else {
        Ok(None)
    }
}

pub fn refine_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (data, _) = dataset(cfg)?;
    let acfg = cfg.agcp()?;
    let models = models_for_source(cfg)?;
    for (name, s) in &data {
        let (d, q) = prediction(cfg, name, s, models.as_ref())?;
        let r = refine_detailed(&d, &q, &s.left, &acfg)?;
        let dir = out.join(name);
        fs::create_dir_all(&dir)?;
        write_disparity_pfm(&dir.join("refined.pfm"), &r.disparity)?;
        let gcp: Vec<f64> = r.gcp.iter().map(|&g| g as u8 as f64).collect();
        write_gray_png(&dir.join("gcp.png"), d.height, d.width, &gcp, 0.0, 1.0)?;
        fs::write(
            dir.join("cg.txt"),
            format!(
                "gcp_count={}\niterations={}\nresidual_norm={}\nconverged={}\n",
                r.gcp.iter().filter(|&&g| g).count(),
                r.cg.iterations,
                r.cg.residual_norm,
                r.cg.converged
            ),
        )?;
        if !r.cg.converged {
            eprintln!("warning: CG did not converge on {name}");
        }
    }
    println!("refined {} samples into {}", data.len(), out.display());
    Ok(())
}

fn summary_table(rows: &[(String, ImageMetrics)], mean: &ImageMetrics) -> String {
    let mut s = format!("{:<10}", "image");
    for c in REPORT_COLUMNS {
        let _ = write!(s, " {c:>13}");
    }
    s.push('\n');
    for (name, m) in rows.iter().map(|(n, m)| (n.as_str(), m)).chain([("mean", mean)]) {
        let _ = write!(s, "{name:<10}");
        for v in [m.auc, m.optimal_auc, m.mse, m.bmp1, m.bmp3, m.bmp1_refined, m.bmp3_refined] {
            let _ = write!(s, " {v:>13.6}");
        }
        s.push('\n');
    }
    s
}

pub fn eval_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (data, _) = dataset(cfg)?;
    let (acfg, ecfg) = (cfg.agcp()?, cfg.eval()?);
    let models = models_for_source(cfg)?;
    let curves = out.join("curves");
    fs::create_dir_all(&curves)?;
    let mut rows = Vec::new();
    for (name, s) in &data {
        let (d, q) = prediction(cfg, name, s, models.as_ref())?;
        let refined = refine_detailed(&d, &q, &s.left, &acfg)?.disparity;
        let (m, curve) = evaluate(s, &d, &q, &refined, &ecfg)?;
        let bad = bad_flags(&d, &s.gt_disparity, &s.gt_valid, ecfg.threshold_px)?;
        let oracle: Vec<f64> = bad.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
        let best = sparsification_from_flags(&oracle, &bad, ecfg.threshold_px, ecfg.n_points)?;
        fs::write(curves.join(format!("{name}.csv")), curve.to_csv())?;
        fs::write(curves.join(format!("{name}_optimal.csv")), best.to_csv())?;
        let flat = vec![curve.errors[0]; curve.densities.len()];
        plot::save(
            &curves.join(format!("{name}.png")),
            &[
                Series { xs: &curve.densities, ys: &flat, color: plot::GRAY },
                Series { xs: &best.densities, ys: &best.errors, color: plot::GREEN },
                Series { xs: &curve.densities, ys: &curve.errors, color: plot::BLUE },
            ],
        )?;
        rows.push((name.clone(), m));
    }
    fs::write(out.join("metrics.csv"), report_csv(&rows)?)?;
    let mean = ImageMetrics::mean(&rows.iter().map(|(_, m)| m.clone()).collect::<Vec<_>>())?;
    let table = summary_table(&rows, &mean);
    fs::write(out.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let reports = run_suite(cfg.seed())?;
    let mut text = String::new();
    for r in &reports {
        let _ = writeln!(
            text,
            "{} {:<40} rel_err {:.3e} (< {:.0e}, {} coords)",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.rel_err,
            r.threshold,
            r.coords
        );
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    let _ = writeln!(text, "{} checks, {failed} failed", reports.len());
    print!("{text}");
    if let Some(dir) = out {
        fs::write(dir.join("gradcheck.txt"), &text)?;
    }
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}
