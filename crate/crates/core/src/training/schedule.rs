use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use super::step::train_step;
use super::{Models, StepStats, TrainConfig, TrainItem};
use crate::error::{Error, Result};
use crate::rng::indexed_substream;
use crate::stereo::{census_sgm_cost, StereoSample};
use crate::tensor::Scalar;

pub const STATS_FILE: &str = "stats.csv";
const STATS_HEADER: &str = "epoch,step,loss_disp,loss_conf_F,loss_adv_G,pos_fraction";
const LATEST_FILE: &str = "latest.txt";

/// Computes census/SGM raw costs for every sample.
pub fn prepare_items(dataset: &[StereoSample]) -> Result<Vec<TrainItem>> {
    dataset
        .iter()
        .map(|s| {
            s.validate()?;
            Ok(TrainItem {
                raw: census_sgm_cost(s)?,
                sample: s.clone(),
            })
        })
        .collect()
}

fn epoch_dir(root: &Path, epoch: usize) -> PathBuf {
    root.join(format!("epoch_{epoch:04}"))
}

fn stats_row(s: &StepStats) -> String {
    format!(
        "{},{},{},{},{},{}\n",
        s.epoch, s.step, s.loss_disp, s.loss_conf_f, s.loss_adv_g, s.pos_fraction
    )
}

/// Reads a stats CSV back into step records.
pub fn read_stats_csv(path: &Path) -> Result<Vec<StepStats>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut offset = 0;
    for (i, line) in text.lines().enumerate() {
        let line_start = offset;
        offset += line.len() + 1;
        if i == 0 || line.is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Parse {
            offset: line_start,
            message: format!("stats line {}: {m}", i + 1),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad("bad number"));
        out.push(StepStats {
            epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
            step: f[1].parse().map_err(|_| bad("bad step"))?,
            loss_disp: num(2)?,
            loss_conf_f: num(3)?,
            loss_adv_g: num(4)?,
            pos_fraction: num(5)?,
            no_valid: false,
        });
    }
    Ok(out)
}

/// Starts a fresh stats file, or trims rows past the resumed epoch.
fn open_stats(root: &Path, resumed_epoch: usize) -> Result<()> {
    let path = root.join(STATS_FILE);
    let mut text = String::from(STATS_HEADER);
    text.push('\n');
    if resumed_epoch > 0 && path.exists() {
        for row in read_stats_csv(&path)? {
            if row.epoch <= resumed_epoch {
                text.push_str(&stats_row(&row));
            }
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn append_stats(root: &Path, rows: &[StepStats]) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(root.join(STATS_FILE))?;
    let mut text = String::new();
    for r in rows {
        text.push_str(&stats_row(r));
    }
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Latest completed epoch recorded under `root`, if any.
pub fn latest_epoch(root: &Path) -> Result<Option<usize>> {
    let path = root.join(LATEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    text.trim()
        .parse()
        .map(Some)
        .map_err(|_| Error::Parse {
            offset: 0,
            message: format!("latest-epoch marker `{}`", text.trim()),
        })
}

/// Loads the checkpoint of the latest completed epoch under `root`.
pub fn load_latest<T: Scalar>(root: &Path) -> Result<Option<Models<T>>> {
    match latest_epoch(root)? {
        None => Ok(None),
        Some(e) => Models::load(&epoch_dir(root, e)).map(Some),
    }
}

/// Shuffled, cropped batches for `epoch`.
fn epoch_batches(items: &[TrainItem], cfg: &TrainConfig, epoch: usize) -> Result<Vec<Vec<TrainItem>>> {
    let mut rng = indexed_substream(cfg.seed, "shuffle", epoch as u64);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);
    let mut crops = Vec::with_capacity(items.len());
    for i in order {
        let it = &items[i];
        let (h, w) = (it.sample.height(), it.sample.width());
        if cfg.crop == 0 {
            crops.push(it.clone());
            continue;
        }
        if cfg.crop > h || cfg.crop > w {
            return Err(Error::invalid(format!(
                "crop {} larger than sample {h}×{w}",
                cfg.crop
            )));
        }
        let y0 = rng.random_range(0..=h - cfg.crop);
        let x0 = rng.random_range(0..=w - cfg.crop);
        crops.push(it.crop(y0, x0, cfg.crop));
    }
    Ok(crops.chunks(cfg.batch).map(|c| c.to_vec()).collect())
}

/// Trains from `models.epoch + 1` through `cfg.epochs`.
///
/// With a checkpoint root, every finished epoch writes `epoch_NNNN/`, appends
/// its rows to `stats.csv` and advances `latest.txt`. Returns the step
/// records of the epochs run here.
pub fn train_loop<T: Scalar>(
    items: &[TrainItem],
    models: &mut Models<T>,
    cfg: &TrainConfig,
    checkpoint_root: Option<&Path>,
) -> Result<Vec<StepStats>> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if let Some(root) = checkpoint_root {
        fs::create_dir_all(root)?;
        open_stats(root, models.epoch)?;
    }
    let mut log = Vec::new();
    for epoch in models.epoch + 1..=cfg.epochs {
        let mut rows = Vec::new();
        for (j, batch) in epoch_batches(items, cfg, epoch)?.iter().enumerate() {
            rows.push(train_step(batch, models, cfg, epoch, j + 1)?);
        }
        models.epoch = epoch;
        if let Some(root) = checkpoint_root {
            models.save(&epoch_dir(root, epoch))?;
            append_stats(root, &rows)?;
            fs::write(root.join(LATEST_FILE), format!("{epoch}\n"))?;
        }
        log.extend(rows);
    }
    Ok(log)
}

/// Per-epoch means of the step records.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub loss_disp: f64,
    pub loss_conf_f: f64,
    pub loss_adv_g: f64,
    pub pos_fraction: f64,
}

pub fn epoch_means(log: &[StepStats]) -> Vec<EpochSummary> {
    let mut out: Vec<(EpochSummary, usize)> = Vec::new();
    for s in log {
        match out.last_mut() {
            Some((e, n)) if e.epoch == s.epoch => {
                e.loss_disp += s.loss_disp;
                e.loss_conf_f += s.loss_conf_f;
                e.loss_adv_g += s.loss_adv_g;
                e.pos_fraction += s.pos_fraction;
                *n += 1;
            }
            _ => out.push((
                EpochSummary {
                    epoch: s.epoch,
                    loss_disp: s.loss_disp,
                    loss_conf_f: s.loss_conf_f,
                    loss_adv_g: s.loss_adv_g,
                    pos_fraction: s.pos_fraction,
                },
                1,
            )),
        }
    }
    out.into_iter()
        .map(|(mut e, n)| {
            let k = n as f64;
            e.loss_disp /= k;
            e.loss_conf_f /= k;
            e.loss_adv_g /= k;
            e.pos_fraction /= k;
            e
        })
        .collect()
}

/// CSV text of per-epoch means.
pub fn epoch_csv(summaries: &[EpochSummary]) -> String {
    let mut s = String::from("epoch,loss_disp,loss_conf_F,loss_adv_G,pos_fraction\n");
    for e in summaries {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            e.epoch, e.loss_disp, e.loss_conf_f, e.loss_adv_g, e.pos_fraction
        );
    }
    s
}
