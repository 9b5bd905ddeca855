//! Generator and discriminator networks, adversarial training and
//! checkpoints.
//!
//! Images enter the networks in `[-1, 1]`; the generator ends in `tanh`.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, load_checkpoint_for,
    save_checkpoint, CheckpointError, CHECKPOINT_VERSION,
};
pub use config::{
    CapsuleDiscriminatorConfig, ConvDiscriminatorConfig, DiscriminatorConfig, GanConfig,
    GeneratorConfig, Schedule, Variant,
};
pub use model::{GanModel, LossHistory, ParamSet, StepRecord};

use thiserror::Error;

use crate::datasets::DataError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum GanError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("discriminator has {parameters} parameters, over the budget of {budget}")]
    Budget { parameters: usize, budget: usize },
    #[error("training requires at least one step")]
    ZeroSteps,
    #[error("{phase} loss became non-finite ({loss}) at step {step}")]
    Divergence {
        step: u64,
        phase: &'static str,
        loss: f64,
    },
    #[error("expected images of shape [N, {}, {}, {}], got {actual:?}", expected[0], expected[1], expected[2])]
    ImageShape {
        expected: [usize; 3],
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}
