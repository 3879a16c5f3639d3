//! Pipeline-parallel transformer training with lossless subspace
//! compression of the activations and gradients that cross stage
//! boundaries.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod subspace;

pub use codec::{CompressedFrame, LossyCodec, MsgType};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use linalg::{Matrix, Real, Tensor3};
pub use model::{Model, ModelDims};
pub use optim::AdamConfig;
pub use pipeline::{Mode, Pipeline, StepReport, TrainState};
pub use subspace::Subspace;
