use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::tensor::Tensor;

use super::{EvalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Affinity {
    /// `w_ij = exp(-gamma ‖x_i - x_j‖²)` for `i ≠ j`.
    Rbf { gamma: f64 },
    /// `w_ij = 1` when `i` and `j` are each among the other's `k` nearest
    /// neighbours (mutual kNN); ties in distance go to the lower index.
    Knn { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpreadConfig {
    pub alpha: f64,
    pub affinity: Affinity,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for LabelSpreadConfig {
    fn default() -> Self {
        LabelSpreadConfig {
            alpha: 0.2,
            affinity: Affinity::Knn { k: 7 },
            max_iters: 1000,
            tol: 1e-6,
        }
    }
}

impl LabelSpreadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(EvalError::Config(format!(
                "alpha must lie strictly inside (0, 1), got {}",
                self.alpha
            )));
        }
        if self.max_iters == 0 || self.tol.is_nan() || self.tol <= 0.0 {
            return Err(EvalError::Config(
                "max_iters and tol must be positive".into(),
            ));
        }
        match self.affinity {
            Affinity::Knn { k: 0 } => Err(EvalError::Config("knn affinity needs k >= 1".into())),
            Affinity::Rbf { gamma } if !(gamma > 0.0 && gamma.is_finite()) => Err(
                EvalError::Config(format!("rbf gamma must be positive, got {gamma}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Sparse symmetric matrix as per-row `(column, value)` lists, columns
/// ascending.
pub type SparseRows = Vec<Vec<(usize, f64)>>;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Affinity matrix over the rows of `features` (`n × dim`, row-major).
pub fn affinity(features: &[f64], dim: usize, kind: &Affinity) -> SparseRows {
    let n = features.len().checked_div(dim).unwrap_or(0);
    let row = |i: usize| &features[i * dim..(i + 1) * dim];
    match *kind {
        Affinity::Rbf { gamma } => (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (j, (-gamma * sq_dist(row(i), row(j))).exp()))
                    .collect()
            })
            .collect(),
        Affinity::Knn { k } => {
            let neighbours: Vec<Vec<usize>> = (0..n)
                .map(|i| {
                    let mut d: Vec<(f64, usize)> = (0..n)
                        .filter(|&j| j != i)
                        .map(|j| (sq_dist(row(i), row(j)), j))
                        .collect();
                    let k = k.min(d.len());
                    if k < d.len() {
                        d.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                        d.truncate(k);
                    }
                    let mut idx: Vec<usize> = d.into_iter().map(|(_, j)| j).collect();
                    idx.sort_unstable();
                    idx
                })
                .collect();
            (0..n)
                .map(|i| {
                    neighbours[i]
                        .iter()
                        .filter(|&&j| neighbours[j].binary_search(&i).is_ok())
                        .map(|&j| (j, 1.0))
                        .collect()
                })
                .collect()
        }
    }
}

/// `S = D^-1/2 W D^-1/2` with `D` the row sums of `W`. Isolated nodes keep
/// empty rows.
pub fn normalize_affinity(w: &SparseRows) -> SparseRows {
    let deg: Vec<f64> = w.iter().map(|r| r.iter().map(|&(_, v)| v).sum()).collect();
    w.iter()
        .enumerate()
        .map(|(i, r)| {
            r.iter()
                .filter(|&&(j, _)| deg[i] > 0.0 && deg[j] > 0.0)
                .map(|&(j, v)| (j, v / (deg[i] * deg[j]).sqrt()))
                .collect()
        })
        .collect()
}

/// Fitted transductive classifier over every graph node.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSpreading {
    pub classes: usize,
    /// Label distributions `F`, `n × classes`, row-major.
    pub distributions: Vec<f64>,
    pub labels: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// `max |F_{t+1} - F_t|` per iteration.
    pub deltas: Vec<f64>,
    /// Nodes that received no label mass and fell back to the label prior.
    pub prior_assigned: Vec<usize>,
}

impl LabelSpreading {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.distributions[i * self.classes..(i + 1) * self.classes]
    }
}

/// Spread `labels` (`None` for unlabeled nodes) over the graph built from
/// `features`: `F ← αSF + (1-α)Y` from `F = Y` until the largest entry
/// change drops below `tol` or `max_iters` is reached.
pub fn label_spread(
    features: &[f64],
    dim: usize,
    labels: &[Option<usize>],
    classes: usize,
    cfg: &LabelSpreadConfig,
) -> Result<LabelSpreading> {
    cfg.validate()?;
    let n = labels.len();
    if dim == 0 || features.len() != n * dim {
        return Err(EvalError::LengthMismatch {
            what: "label_spread features",
            left: features.len(),
            right: n * dim,
        });
    }
    if classes == 0 {
        return Err(EvalError::Config("classes must be positive".into()));
    }
    let mut y = vec![0.0; n * classes];
    let mut prior = vec![0usize; classes];
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = *l {
            if c >= classes {
                return Err(EvalError::Config(format!(
                    "label {c} out of range for {classes} classes"
                )));
            }
            y[i * classes + c] = 1.0;
            prior[c] += 1;
        }
    }
    if prior.iter().all(|&c| c == 0) {
        return Err(EvalError::NoLabels);
    }

    let s = normalize_affinity(&affinity(features, dim, &cfg.affinity));
    let alpha = cfg.alpha;
    let mut f = y.clone();
    let mut next = vec![0.0; n * classes];
    let mut deltas = Vec::new();
    let mut converged = false;
    while deltas.len() < cfg.max_iters {
        for i in 0..n {
            let out = &mut next[i * classes..(i + 1) * classes];
            for (o, yv) in out.iter_mut().zip(&y[i * classes..(i + 1) * classes]) {
                *o = (1.0 - alpha) * yv;
            }
            for &(j, sij) in &s[i] {
                for (o, fv) in out.iter_mut().zip(&f[j * classes..(j + 1) * classes]) {
                    *o += alpha * sij * fv;
                }
            }
        }
        let delta = f
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut f, &mut next);
        deltas.push(delta);
        if delta < cfg.tol {
            converged = true;
            break;
        }
    }

    let prior_class = argmax(&prior.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let mut prior_assigned = Vec::new();
    let labels_out = (0..n)
        .map(|i| {
            let row = &f[i * classes..(i + 1) * classes];
            if row.iter().all(|&v| v <= 0.0) {
                prior_assigned.push(i);
                prior_class
            } else {
                argmax(row)
            }
        })
        .collect();
    if !prior_assigned.is_empty() {
        log::warn!(
            "{} of {n} nodes are cut off from every labeled point; assigned the most frequent label {prior_class}",
            prior_assigned.len()
        );
    }
    Ok(LabelSpreading {
        classes,
        distributions: f,
        labels: labels_out,
        iterations: deltas.len(),
        converged,
        deltas,
        prior_assigned,
    })
}

/// First index of the largest value.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Label spreading with the `labeled` images (any range; converted to
/// `[0, 1]`) followed by `unlabeled` images already in `[0, 1]`, both as
/// flattened raw pixels. Node `i < labeled.len()` is labeled point `i`;
/// the rest follow in `unlabeled` order.
pub fn label_spread_fit(
    labeled: &LabeledDataset,
    unlabeled: &Tensor,
    cfg: &LabelSpreadConfig,
) -> Result<LabelSpreading> {
    if labeled.is_empty() {
        return Err(EvalError::NoLabels);
    }
    let shape = labeled.image_shape();
    let dim: usize = shape.iter().product();
    let mut features = labeled.to_raw().into_data();
    let mut nodes: Vec<Option<usize>> = labeled.labels.iter().map(|&l| Some(l)).collect();
    if !unlabeled.is_empty() {
        if unlabeled.ndim() != 4 || unlabeled.shape()[1..] != shape {
            return Err(EvalError::ShapeMismatch {
                left: shape,
                right: [
                    unlabeled.shape().get(1).copied().unwrap_or(0),
                    unlabeled.shape().get(2).copied().unwrap_or(0),
                    unlabeled.shape().get(3).copied().unwrap_or(0),
                ],
            });
        }
        features.extend_from_slice(unlabeled.data());
        nodes.extend(std::iter::repeat_n(None, unlabeled.shape()[0]));
    }
    label_spread(&features, dim, &nodes, labeled.classes, cfg)
}
