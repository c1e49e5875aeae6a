//! Minimal differentiable operator substrate: a reverse-mode tape, named
//! parameter storage with checkpoints, and SGD with momentum.

pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;

pub use layers::{add_conv_bn, commit_updates, BnMode, Net};
pub use params::{sgd_momentum_step, Init, ParamKind, ParamStore, BN_EPS, BN_MOMENTUM};
pub use tape::{Activation, BatchStats, Gradients, Tape, Var};
