//! Model comparison by adversarial battles and semi-supervised
//! classification with generated images as unlabeled data.

mod gam;
mod semisup;
mod spreading;

pub use gam::{gam_battle, gam_both, score_accuracy, GamComparison, GamConfig, GamReport, Verdict};
pub use semisup::{semi_sup_experiment, stratified_sample, SemiSupConfig, SemiSupReport};
pub use spreading::{
    affinity, label_spread, label_spread_fit, normalize_affinity, Affinity, LabelSpreadConfig,
    LabelSpreading, SparseRows,
};

use thiserror::Error;

use crate::datasets::DataError;
use crate::gan::GanError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("accuracy of an empty set is undefined")]
    Empty,
    #[error("{what}: {left} predictions but {right} targets")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("degenerate battle: {which} is zero, so the ratio is undefined")]
    DegenerateBattle { which: &'static str },
    #[error("models disagree on image shape: {left:?} vs {right:?}")]
    ShapeMismatch { left: [usize; 3], right: [usize; 3] },
    #[error("label spreading needs at least one labeled point")]
    NoLabels,
    #[error("class {class} is absent from the labeled sample")]
    Stratification { class: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Fraction of positions where `predictions` equals `targets`.
pub fn accuracy<T: PartialEq>(predictions: &[T], targets: &[T]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(EvalError::LengthMismatch {
            what: "accuracy",
            left: predictions.len(),
            right: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Published figures kept for side-by-side reporting. They come from full
/// 50,000-sample runs with unpublished architectures and are not expected
/// to be matched by the small defaults here.
pub mod reference {
    /// `(r_samples, r_test)` with the convolutional GAN as model 1 and the
    /// capsule GAN as model 2.
    pub const GAM_MNIST: (f64, f64) = (0.79, 1.0);
    pub const GAM_CIFAR10: (f64, f64) = (1.0, 0.72);

    /// Labeled-set sizes of the semi-supervised error tables.
    pub const SEMISUP_N: [usize; 3] = [100, 1000, 10_000];
    /// Error rates by `SEMISUP_N`.
    pub const SEMISUP_MNIST_CONV: [f64; 3] = [0.2900, 0.1539, 0.0702];
    pub const SEMISUP_MNIST_CAPSULE: [f64; 3] = [0.2724, 0.1142, 0.0531];
    pub const SEMISUP_CIFAR10_CONV: [f64; 3] = [0.8305, 0.7587, 0.7209];
    pub const SEMISUP_CIFAR10_CAPSULE: [f64; 3] = [0.7983, 0.7496, 0.7102];
    pub const SEMISUP_UNLABELED: usize = 50_000;
}
