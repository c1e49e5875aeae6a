//! Losses and the adversarial training procedure.
//!
//! Each step updates the confidence network F on detached generator outputs
//! and then the generator G on `L_disp + λ·L_adv`, where `L_adv` reaches G
//! only through pixels whose current disparity is wrong.

mod losses;
mod schedule;
mod step;

pub use losses::{
    adv_loss_graph, conf_loss_graph, disp_loss_graph, loss_adv_g, loss_conf_f, loss_disp,
    DispLossGraph, CONF_EPS,
};
pub use schedule::{
    epoch_csv, epoch_means, latest_epoch, load_latest, prepare_items, read_stats_csv,
    train_loop, EpochSummary, STATS_FILE,
};
pub use step::{generator_gradients, train_step, GeneratorTerm};

use std::fs;
use std::path::Path;

use crate::discriminator::{init_discriminator_params, DiscriminatorConfig, Fusion};
use crate::error::{Error, Result};
use crate::generator::{init_generator_params, GeneratorConfig};
use crate::nn::ParamStore;
use crate::stereo::{CostVolume, StereoSample, DEFAULT_RHO};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplier on `lr` for the confidence network.
    pub f_lr_scale: f64,
    pub batch: usize,
    pub momentum: f64,
    pub lambda: f64,
    pub rho: f64,
    pub recon_weight: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    /// Square crop side; 0 trains on whole images.
    pub crop: usize,
    pub seed: u64,
    /// Restrict the reconstruction term to pixels the confidence network
    /// currently rates above `rho`.
    pub recon_gate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            f_lr_scale: 1.0,
            batch: 20,
            momentum: 0.9,
            lambda: 1.0,
            rho: DEFAULT_RHO,
            recon_weight: 1.0,
            warmup_epochs: 5,
            epochs: 20,
            crop: 32,
            seed: 0,
            recon_gate: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("lr {} must be ≥ 0", self.lr)));
        }
        if !(self.f_lr_scale >= 0.0) || !self.f_lr_scale.is_finite() {
            return Err(Error::invalid(format!("f_lr_scale {} must be ≥ 0", self.f_lr_scale)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.lambda >= 0.0) || !(self.recon_weight >= 0.0) {
            return Err(Error::invalid("lambda and recon_weight must be ≥ 0"));
        }
        if !(self.rho > 0.0) {
            return Err(Error::invalid(format!("rho {} must be positive", self.rho)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be ≥ 1"));
        }
        if self.crop % 4 != 0 {
            return Err(Error::invalid(format!("crop {} not divisible by 4", self.crop)));
        }
        Ok(())
    }
}

/// Losses of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss_disp: f64,
    pub loss_conf_f: f64,
    /// 0 during warmup, where the adversarial branch is not evaluated.
    pub loss_adv_g: f64,
    pub pos_fraction: f64,
    /// The batch had no valid ground-truth pixel.
    pub no_valid: bool,
    pub epoch: usize,
    pub step: usize,
}

/// A training sample with its precomputed raw cost volume.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub sample: StereoSample,
    pub raw: CostVolume,
}

impl TrainItem {
    pub fn crop(&self, y0: usize, x0: usize, side: usize) -> TrainItem {
        TrainItem {
            sample: self.sample.crop(y0, x0, side, side),
            raw: self.raw.crop(y0, x0, side, side),
        }
    }
}

const STATE_FILE: &str = "state.txt";

/// Both networks, their configurations and the number of completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Models<T> {
    pub g: ParamStore<T>,
    pub f: ParamStore<T>,
    pub gcfg: GeneratorConfig,
    pub fcfg: DiscriminatorConfig,
    pub epoch: usize,
}

impl<T: Scalar> Models<T> {
    pub fn init(gcfg: GeneratorConfig, fcfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        Ok(Models {
            g: init_generator_params(&gcfg, seed)?,
            f: init_discriminator_params(&fcfg, gcfg.k, seed)?,
            gcfg,
            fcfg,
            epoch: 0,
        })
    }

    /// Writes `g/`, `f/` and a state file describing both configurations.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.g.save(&dir.join("g"))?;
        self.f.save(&dir.join("f"))?;
        let g = &self.gcfg;
        let f = &self.fcfg;
        let state = format!(
            "epoch={}\nbase_channels={}\nsigma={}\nk={}\nd_max={}\nfeat_channels={}\nfusion={}\nhead_depth={}\n",
            self.epoch, g.base_channels, g.sigma, g.k, g.d_max, f.feat_channels, f.fusion, f.head_depth
        );
        fs::write(dir.join(STATE_FILE), state)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(STATE_FILE))?;
        let mut kv = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                offset: i,
                message: format!("state line `{line}` is not key=value"),
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn get<V: std::str::FromStr>(
            kv: &std::collections::BTreeMap<String, String>,
            key: &str,
        ) -> Result<V> {
            kv.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::invalid(format!("state file lacks a valid `{key}`")))
        }
        let gcfg = GeneratorConfig {
            base_channels: get(&kv, "base_channels")?,
            sigma: get(&kv, "sigma")?,
            k: get(&kv, "k")?,
            d_max: get(&kv, "d_max")?,
        };
        let fusion: String = get(&kv, "fusion")?;
        let fcfg = DiscriminatorConfig {
            feat_channels: get(&kv, "feat_channels")?,
            fusion: fusion.parse::<Fusion>()?,
            head_depth: get(&kv, "head_depth")?,
        };
        gcfg.validate()?;
        fcfg.validate()?;
        Ok(Models {
            g: ParamStore::load(&dir.join("g"))?,
            f: ParamStore::load(&dir.join("f"))?,
            gcfg,
            fcfg,
            epoch: get(&kv, "epoch")?,
        })
    }
}
