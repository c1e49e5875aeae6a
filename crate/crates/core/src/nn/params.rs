//! Named parameter storage, initialization, the momentum optimizer and the
//! on-disk checkpoint format.
//!
//! A checkpoint is a directory holding `manifest.txt` plus one raw
//! little-endian blob per tensor. Manifest lines are
//! `name<TAB>shape<TAB>dtype<TAB>kind`, with the shape written as
//! `3x3x8x16`. Trainable entries additionally store their momentum buffer
//! in `<name>.momentum.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use super::tape::{BatchStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::{Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Non-trainable state, e.g. batch-norm running statistics.
    Buffer,
}

impl ParamKind {
    fn as_str(self) -> &'static str {
        match self {
            ParamKind::Trainable => "param",
            ParamKind::Buffer => "buffer",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Entry<T>>,
    rng_seed: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let zeros = Tensor::zeros(value.shape());
        self.entries.insert(
            name.to_string(),
            Entry {
                grad: zeros.clone(),
                momentum: zeros,
                value,
                kind,
            },
        );
        Ok(())
    }

    /// Registers `name.w` (`k×k×cin×cout`) and `name.b` (`cout`).
    pub fn add_conv(
        &mut self,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        init: Init,
    ) -> Result<()> {
        let wname = format!("{name}.w");
        let shape = [k, k, cin, cout];
        let w = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::HeNormal => {
                let std = (2.0 / (k * k * cin) as f64).sqrt();
                let mut rng = substream(self.rng_seed, &wname);
                let data = (0..k * k * cin * cout)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        T::of(z * std)
                    })
                    .collect();
                Tensor::from_vec(&shape, data)?
            }
        };
        self.insert(&wname, w, ParamKind::Trainable)?;
        self.insert(&format!("{name}.b"), Tensor::zeros(&[cout]), ParamKind::Trainable)
    }

    /// Registers affine parameters and running statistics for batch norm.
    pub fn add_batch_norm(&mut self, name: &str, channels: usize) -> Result<()> {
        self.insert(
            &format!("{name}.gamma"),
            Tensor::filled(&[channels], T::one()),
            ParamKind::Trainable,
        )?;
        self.insert(
            &format!("{name}.beta"),
            Tensor::zeros(&[channels]),
            ParamKind::Trainable,
        )?;
        self.insert(
            &format!("{name}.running_mean"),
            Tensor::zeros(&[channels]),
            ParamKind::Buffer,
        )?;
        self.insert(
            &format!("{name}.running_var"),
            Tensor::filled(&[channels], T::one()),
            ParamKind::Buffer,
        )
    }

    pub fn entry(&self, name: &str) -> Result<&Entry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn entry_mut(&mut self, name: &str) -> Result<&mut Entry<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entry(name)?.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        Ok(&mut self.entry_mut(name)?.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Records the parameter on `tape` as a trainable leaf.
    pub fn leaf(&self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        Ok(tape.param(name, self.get(name)?.clone()))
    }

    /// Adds the gradients of every parameter leaf on `tape` into the
    /// accumulators of this store. Leaves naming parameters of another store
    /// are skipped.
    pub fn accumulate(&mut self, tape: &Tape<T>, grads: &Gradients<T>) {
        for (name, var) in tape.params() {
            if let (Some(entry), Some(g)) = (self.entries.get_mut(name), grads.get(*var)) {
                entry.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(T::zero());
        }
    }

    /// Folds train-mode batch statistics into the running statistics of the
    /// batch norm layer `name`. Variance is stored unbiased.
    pub fn commit_batch_stats(&mut self, name: &str, stats: &BatchStats<T>) -> Result<()> {
        let m = T::of(BN_MOMENTUM);
        let correction = if stats.count > 1 {
            T::of(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            T::one()
        };
        let mean = self.get_mut(&format!("{name}.running_mean"))?;
        for (r, &b) in mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        let var = self.get_mut(&format!("{name}.running_var"))?;
        for (r, &b) in var.data_mut().iter_mut().zip(&stats.var) {
            *r = (T::one() - m) * *r + m * b * correction;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|e| e.value.all_finite())
    }

    /// Writes the store as a checkpoint directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = format!("# rng_seed {}\n", self.rng_seed);
        for (name, e) in &self.entries {
            let shape: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!(
                "{name}\t{}\t{}\t{}\n",
                shape.join("x"),
                T::DTYPE,
                e.kind.as_str()
            ));
            fs::write(dir.join(format!("{name}.bin")), encode(&e.value))?;
            if e.kind == ParamKind::Trainable {
                fs::write(dir.join(format!("{name}.momentum.bin")), encode(&e.momentum))?;
            }
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    /// Reads a checkpoint directory written by [`ParamStore::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let mut store = ParamStore::new(0);
        let mut offset = 0;
        for line in text.lines() {
            let line_offset = offset;
            offset += line.len() + 1;
            if let Some(rest) = line.strip_prefix("# rng_seed ") {
                store.rng_seed = rest.trim().parse().map_err(|_| Error::Parse {
                    offset: line_offset,
                    message: format!("bad rng seed `{rest}`"),
                })?;
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |message: String| Error::Parse {
                offset: line_offset,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, shape, dtype, kind] = fields[..] else {
                return Err(bad(format!("expected 4 tab-separated fields in `{line}`")));
            };
            if dtype != T::DTYPE {
                return Err(bad(format!(
                    "`{name}` stored as {dtype}, loading as {}",
                    T::DTYPE
                )));
            }
            let shape: Vec<usize> = shape
                .split('x')
                .map(|s| s.parse().map_err(|_| bad(format!("bad shape `{shape}`"))))
                .collect::<Result<_>>()?;
            let kind = match kind {
                "param" => ParamKind::Trainable,
                "buffer" => ParamKind::Buffer,
                other => return Err(bad(format!("unknown kind `{other}`"))),
            };
            let value = decode(&fs::read(dir.join(format!("{name}.bin")))?, &shape)?;
            store.insert(name, value, kind)?;
            if kind == ParamKind::Trainable {
                let m = decode(&fs::read(dir.join(format!("{name}.momentum.bin")))?, &shape)?;
                store.entry_mut(name)?.momentum = m;
            }
        }
        Ok(store)
    }
}

fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * T::BYTES);
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn decode<T: Scalar>(bytes: &[u8], shape: &[usize]) -> Result<Tensor<T>> {
    let len: usize = shape.iter().product();
    if bytes.len() != len * T::BYTES {
        return Err(Error::Parse {
            offset: bytes.len().min(len * T::BYTES),
            message: format!(
                "blob holds {} bytes, shape {shape:?} needs {}",
                bytes.len(),
                len * T::BYTES
            ),
        });
    }
    Tensor::from_vec(shape, bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
}

/// One SGD-with-momentum update over every trainable entry:
/// `m ← mu·m + grad; value ← value − lr·m`, then gradients are zeroed.
pub fn sgd_momentum_step<T: Scalar>(store: &mut ParamStore<T>, lr: f64, mu: f64) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::invalid(format!("learning rate {lr} must be ≥ 0")));
    }
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::invalid(format!("momentum {mu} must lie in [0, 1)")));
    }
    let lr = T::of(lr);
    let mu = T::of(mu);
    for e in store.entries.values_mut() {
        if e.kind == ParamKind::Trainable {
            for ((m, v), &g) in e
                .momentum
                .data_mut()
                .iter_mut()
                .zip(e.value.data_mut())
                .zip(e.grad.data())
            {
                *m = mu * *m + g;
                *v -= lr * *m;
            }
        }
        e.grad.fill(T::zero());
    }
    Ok(())
}
