//! Flat `key=value` run configuration.
//!
//! Values are merged in the order defaults, config file, `--set`, `--seed`.
//! Every key must appear in [`SCHEMA`] and every value must parse as its
//! declared type.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use advstereo::agcp::AgcpConfig;
use advstereo::discriminator::{DiscriminatorConfig, Fusion};
use advstereo::generator::GeneratorConfig;
use advstereo::pipeline::EvalConfig;
use advstereo::training::TrainConfig;
use anyhow::{anyhow, bail, Context, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    UInt,
    Float,
    Bool,
    Path,
    Choice(&'static [&'static str]),
}

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub kind: Kind,
    pub help: &'static str,
}

const fn k(key: &'static str, default: &'static str, kind: Kind, help: &'static str) -> KeySpec {
    KeySpec { key, default, kind, help }
}

pub const CONFIDENCE_CHOICES: &[&str] = &["learned", "ground_truth", "constant"];
pub const SOURCE_CHOICES: &[&str] = &["predictions", "model", "wta"];

pub const SCHEMA: &[KeySpec] = &[
    k("seed", "0", Kind::UInt, "root of every random sub-stream"),
    k("synth.count", "20", Kind::UInt, "number of scenes"),
    k("synth.height", "64", Kind::UInt, "scene height"),
    k("synth.width", "64", Kind::UInt, "scene width"),
    k("synth.d_max", "8", Kind::UInt, "disparity candidates"),
    k("synth.layers", "3", Kind::UInt, "foreground rectangles per scene"),
    k("data.dir", "", Kind::Path, "input dataset directory"),
    k("model.checkpoint", "", Kind::Path, "training output root or epoch directory"),
    k("pred.dir", "", Kind::Path, "output directory of `infer`"),
    k("pred.source", "predictions", Kind::Choice(SOURCE_CHOICES), "disparity origin for refine and eval"),
    k("pred.confidence", "learned", Kind::Choice(CONFIDENCE_CHOICES), "confidence for refine and eval"),
    k("gen.base_channels", "8", Kind::UInt, "generator width"),
    k("gen.sigma", "0.01", Kind::Float, "softmax flatness"),
    k("gen.k", "5", Kind::UInt, "top-K candidates"),
    k("disc.feat_channels", "8", Kind::UInt, "discriminator width"),
    k("disc.fusion", "dynamic", Kind::Choice(&["dynamic", "concat"]), "feature fusion"),
    k("disc.head_depth", "3", Kind::UInt, "head layers including the last 1x1"),
    k("train.lr", "0.0003", Kind::Float, "generator learning rate"),
    k("train.f_lr_scale", "10", Kind::Float, "discriminator lr multiplier"),
    k("train.batch", "2", Kind::UInt, "samples per step"),
    k("train.momentum", "0.9", Kind::Float, "SGD momentum"),
    k("train.lambda", "0.003", Kind::Float, "adversarial weight"),
    k("train.rho", "0.9", Kind::Float, "ground-truth confidence threshold in px"),
    k("train.recon_weight", "1", Kind::Float, "photometric term weight"),
    k("train.warmup_epochs", "5", Kind::UInt, "epochs without adversarial and photometric terms"),
    k("train.epochs", "20", Kind::UInt, "last epoch to train"),
    k("train.crop", "32", Kind::UInt, "square crop side, 0 for whole images"),
    k("train.recon_gate", "false", Kind::Bool, "gate the photometric term by confidence"),
    k("train.resume", "true", Kind::Bool, "continue from the output's latest checkpoint"),
    k("agcp.tau", "0.7", Kind::Float, "GCP confidence threshold"),
    k("agcp.gamma", "1", Kind::Float, "smoothness weight"),
    k("agcp.radius", "2", Kind::UInt, "data-term window radius"),
    k("agcp.sigma_color", "0.1", Kind::Float, "color bandwidth"),
    k("agcp.sigma_space", "2", Kind::Float, "spatial bandwidth"),
    k("agcp.cg_tol", "1e-8", Kind::Float, "relative CG residual"),
    k("agcp.cg_max_iter", "5000", Kind::UInt, "CG iteration cap"),
    k("eval.threshold_px", "1", Kind::Float, "bad-pixel threshold of the curves"),
    k("eval.n_points", "100", Kind::UInt, "curve samples"),
    k("eval.rho", "0.9", Kind::Float, "ground-truth confidence threshold in px"),
];

fn spec(key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|s| s.key == key)
}

fn check_value(spec: &KeySpec, value: &str) -> Result<()> {
    let ok = match spec.kind {
        Kind::UInt => value.parse::<u64>().is_ok(),
        Kind::Float => value.parse::<f64>().map(f64::is_finite).unwrap_or(false),
        Kind::Bool => matches!(value, "true" | "false"),
        Kind::Path => true,
        Kind::Choice(c) => c.contains(&value),
    };
    if !ok {
        let want = match spec.kind {
            Kind::UInt => "a non-negative integer".to_string(),
            Kind::Float => "a finite number".to_string(),
            Kind::Bool => "true or false".to_string(),
            Kind::Path => "a path".to_string(),
            Kind::Choice(c) => format!("one of {}", c.join(", ")),
        };
        bail!("`{}` must be {want}, got `{value}`", spec.key);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: SCHEMA.iter().map(|s| (s.key, s.default.to_string())).collect(),
        }
    }
}

/// Splits `key=value` with surrounding whitespace removed.
fn split_pair(text: &str) -> Result<(&str, &str)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| anyhow!("expected key=value, got `{text}`"))?;
    Ok((k.trim(), v.trim()))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = spec(key).ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
        check_value(s, value)?;
        self.values.insert(s.key, value.to_string());
        Ok(())
    }

    /// Applies a config file; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            split_pair(line)
                .and_then(|(k, v)| self.set(k, v))
                .with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = split_pair(pair)?;
        self.set(k, v).with_context(|| format!("--set {pair}"))
    }

    /// Every key in schema order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for spec in SCHEMA {
            let _ = writeln!(s, "{}={}", spec.key, self.values[spec.key]);
        }
        s
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` is not in the schema"))
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated on insert")
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        usize::try_from(self.u64(key)).with_context(|| format!("`{key}` too large"))
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated on insert")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    /// A path key that must be set.
    pub fn path(&self, key: &str) -> Result<PathBuf> {
        let v = self.get(key);
        if v.is_empty() {
            bail!("`{key}` is required for this command");
        }
        Ok(PathBuf::from(v))
    }

    pub fn seed(&self) -> u64 {
        self.u64("seed")
    }

    pub fn generator(&self, d_max: usize) -> Result<GeneratorConfig> {
        let g = GeneratorConfig {
            base_channels: self.usize("gen.base_channels")?,
            sigma: self.f64("gen.sigma"),
            k: self.usize("gen.k")?.min(d_max),
            d_max,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn discriminator(&self) -> Result<DiscriminatorConfig> {
        let f = DiscriminatorConfig {
            feat_channels: self.usize("disc.feat_channels")?,
            fusion: self.get("disc.fusion").parse::<Fusion>()?,
            head_depth: self.usize("disc.head_depth")?,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            lr: self.f64("train.lr"),
            f_lr_scale: self.f64("train.f_lr_scale"),
            batch: self.usize("train.batch")?,
            momentum: self.f64("train.momentum"),
            lambda: self.f64("train.lambda"),
            rho: self.f64("train.rho"),
            recon_weight: self.f64("train.recon_weight"),
            warmup_epochs: self.usize("train.warmup_epochs")?,
            epochs: self.usize("train.epochs")?,
            crop: self.usize("train.crop")?,
            seed: self.seed(),
            recon_gate: self.bool("train.recon_gate"),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn agcp(&self) -> Result<AgcpConfig> {
        let a = AgcpConfig {
            tau: self.f64("agcp.tau"),
            gamma: self.f64("agcp.gamma"),
            radius_m: self.usize("agcp.radius")?,
            sigma_color: self.f64("agcp.sigma_color"),
            sigma_space: self.f64("agcp.sigma_space"),
            cg_tol: self.f64("agcp.cg_tol"),
            cg_max_iter: self.usize("agcp.cg_max_iter")?,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        let e = EvalConfig {
            threshold_px: self.f64("eval.threshold_px"),
            n_points: self.usize("eval.n_points")?,
            rho: self.f64("eval.rho"),
        };
        if !(e.threshold_px > 0.0) || !(e.rho > 0.0) || e.n_points < 2 {
            bail!("eval needs positive threshold_px and rho and at least 2 points");
        }
        Ok(e)
    }
}
