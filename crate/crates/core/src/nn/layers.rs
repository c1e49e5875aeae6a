use super::params::{ParamStore, BN_EPS};
use super::tape::{BatchStats, Tape, Var};
use crate::error::Result;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and report them for the running
    /// averages.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

/// Forward-pass context binding a tape to a read-only parameter store.
///
/// Train-mode batch norms collect their batch statistics in `bn_updates`;
/// the caller decides whether to fold them into the store.
pub struct Net<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub mode: BnMode,
    pub bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Scalar> Net<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: BnMode) -> Self {
        Net {
            tape,
            store,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn conv(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.store.leaf(self.tape, &format!("{name}.w"))?;
        let b = self.store.leaf(self.tape, &format!("{name}.b"))?;
        self.tape.conv2d(x, w, Some(b))
    }

    pub fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.store.leaf(self.tape, &format!("{name}.gamma"))?;
        let beta = self.store.leaf(self.tape, &format!("{name}.beta"))?;
        let eps = T::of(BN_EPS);
        match self.mode {
            BnMode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, gamma, beta, eps)?;
                self.bn_updates.push((name.to_string(), stats));
                Ok(y)
            }
            BnMode::Eval => {
                let mean = self.store.get(&format!("{name}.running_mean"))?.data();
                let var = self.store.get(&format!("{name}.running_var"))?.data();
                self.tape.batch_norm_eval(x, gamma, beta, eps, mean, var)
            }
        }
    }

    /// conv → batch norm → ReLU, with the norm registered as `{name}.bn`.
    pub fn conv_bn_relu(&mut self, name: &str, x: Var) -> Result<Var> {
        let y = self.conv(name, x)?;
        let y = self.batch_norm(&format!("{name}.bn"), y)?;
        Ok(self.tape.relu(y))
    }

    pub fn into_updates(self) -> Vec<(String, BatchStats<T>)> {
        self.bn_updates
    }
}

/// Registers a conv + batch norm block in `store`.
pub fn add_conv_bn<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
) -> Result<()> {
    store.add_conv(name, k, cin, cout, super::params::Init::HeNormal)?;
    store.add_batch_norm(&format!("{name}.bn"), cout)
}

/// Folds collected batch statistics into the running averages of `store`.
pub fn commit_updates<T: Scalar>(
    store: &mut ParamStore<T>,
    updates: &[(String, BatchStats<T>)],
) -> Result<()> {
    for (name, stats) in updates {
        store.commit_batch_stats(name, stats)?;
    }
    Ok(())
}
