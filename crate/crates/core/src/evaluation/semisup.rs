use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::gan::{GanModel, Variant};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;

use super::spreading::{label_spread_fit, LabelSpreadConfig};
use super::{accuracy, EvalError, Result};

const STRATIFY_PURPOSE: u64 = 0x57a7_0000;
const SAMPLES_PURPOSE: u64 = 0x5a3b_0000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiSupConfig {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub spreading: LabelSpreadConfig,
}

impl Default for SemiSupConfig {
    fn default() -> Self {
        SemiSupConfig {
            n_labeled: 100,
            n_unlabeled: 50_000,
            spreading: LabelSpreadConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiSupReport {
    pub variant: Variant,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub error_rate: f64,
    pub accuracy: f64,
    /// Error of always predicting the most frequent test class.
    pub majority_baseline_error: f64,
    pub iterations: usize,
    pub converged: bool,
    pub prior_assigned: usize,
    pub spreading: LabelSpreadConfig,
    pub seed: u64,
}

/// `n` indices of `ds` drawn so every class present in `ds` gets at least
/// one point and the rest follow class frequencies (largest remainder).
pub fn stratified_sample(ds: &LabeledDataset, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > ds.len() {
        return Err(EvalError::Config(format!(
            "n_labeled {n} exceeds the {} available examples",
            ds.len()
        )));
    }
    let counts = ds.class_counts();
    let present: Vec<usize> = (0..ds.classes).filter(|&c| counts[c] > 0).collect();
    if n < present.len() {
        // class indices run in order, so the first one without a slot is
        // the one left out
        return Err(EvalError::Stratification { class: present[n] });
    }
    let mut quota = vec![0usize; ds.classes];
    for &c in &present {
        quota[c] = 1;
    }
    let rest = n - present.len();
    let total = ds.len() as f64;
    let mut fractional: Vec<(f64, usize)> = Vec::new();
    let mut assigned = 0;
    for &c in &present {
        let share = rest as f64 * counts[c] as f64 / total;
        let whole = (share.floor() as usize).min(counts[c] - quota[c]);
        quota[c] += whole;
        assigned += whole;
        fractional.push((share - share.floor(), c));
    }
    fractional.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = rest - assigned;
    while left > 0 {
        let before = left;
        for &(_, c) in &fractional {
            if left > 0 && quota[c] < counts[c] {
                quota[c] += 1;
                left -= 1;
            }
        }
        debug_assert!(left < before, "n <= len guarantees room");
    }

    let mut rng = SeededRng::with_stream(seed ^ STRATIFY_PURPOSE, 0);
    let mut picked = Vec::with_capacity(n);
    for c in 0..ds.classes {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        rng.shuffle(&mut members);
        picked.extend_from_slice(&members[..quota[c]]);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Generate `n_unlabeled` images with `model`, label `n_labeled` real
/// training images (class-stratified), and spread labels over a graph that
/// also holds every test image as an unlabeled node. The test error is read
/// off the test nodes.
pub fn semi_sup_experiment(
    model: &GanModel,
    real_train: &LabeledDataset,
    real_test: &LabeledDataset,
    cfg: &SemiSupConfig,
    seed: u64,
) -> Result<SemiSupReport> {
    if real_test.is_empty() {
        return Err(EvalError::Empty);
    }
    if real_train.classes != real_test.classes {
        return Err(EvalError::Config(
            "train and test sets disagree on the class count".into(),
        ));
    }
    let labeled = real_train.subset(&stratified_sample(real_train, cfg.n_labeled, seed)?)?;
    let mut parts = Vec::new();
    if cfg.n_unlabeled > 0 {
        let gen = model.generate(cfg.n_unlabeled, derive_seed(seed, SAMPLES_PURPOSE, 0))?;
        parts.push(gen.map(|v| (v + 1.0) / 2.0));
    }
    parts.push(real_test.to_raw());
    let refs: Vec<&Tensor> = parts.iter().collect();
    let unlabeled = Tensor::concat_rows(&refs)?;
    let fit = label_spread_fit(&labeled, &unlabeled, &cfg.spreading)?;

    let offset = labeled.len() + cfg.n_unlabeled;
    let predicted = &fit.labels[offset..];
    let acc = accuracy(predicted, &real_test.labels)?;
    let counts = real_test.class_counts();
    let majority = *counts.iter().max().expect("classes > 0") as f64 / real_test.len() as f64;
    let prior_on_test = fit.prior_assigned.iter().filter(|&&i| i >= offset).count();
    if prior_on_test > 0 {
        log::warn!("{prior_on_test} test points fell back to the label prior");
    }
    Ok(SemiSupReport {
        variant: model.config.variant(),
        n_labeled: labeled.len(),
        n_unlabeled: cfg.n_unlabeled,
        n_test: real_test.len(),
        error_rate: 1.0 - acc,
        accuracy: acc,
        majority_baseline_error: 1.0 - majority,
        iterations: fit.iterations,
        converged: fit.converged,
        prior_assigned: fit.prior_assigned.len(),
        spreading: cfg.spreading,
        seed,
    })
}
