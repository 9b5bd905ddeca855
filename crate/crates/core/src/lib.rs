//! Generative adversarial networks with a capsule-network discriminator
//! trained under the margin loss, plus the evaluation harnesses used to
//! compare them against a convolutional baseline.
//!
//! Everything runs on a small reverse-mode autodiff core over `f64` tensors:
//!
//! * [`tensor`], [`autodiff`], [`optim`], [`rng`]: numerical substrate
//! * [`capsnet`]: squash, primary capsules, routing-by-agreement, margin loss
//! * [`gan`]: generator/discriminator models, adversarial training, checkpoints
//! * [`evaluation`]: generative adversarial metric battles and label spreading
//! * [`datasets`]: MNIST / CIFAR-10 readers and a synthetic multi-mode source

pub mod autodiff;
pub mod capsnet;
pub mod datasets;
pub mod evaluation;
pub mod gan;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Op, Var};
pub use capsnet::{AgreementKind, MarginLossConfig, PrimaryCapsSpec, RoutingConfig};
pub use datasets::{DataError, LabeledDataset};
pub use gan::{GanConfig, GanError, GanModel, Variant};
pub use optim::AdamConfig;
pub use rng::SeededRng;
pub use tensor::{Tensor, TensorError};
