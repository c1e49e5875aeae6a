pub mod agcp;
pub mod batch;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod gradsuite;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod stereo;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
