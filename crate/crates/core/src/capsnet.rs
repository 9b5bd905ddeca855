//! Capsule layers and the margin loss, expressed as graph operations.
//!
//! Capsule tensors are laid out `[batch, capsules, dim]`. The routed layer
//! runs routing-by-agreement fully unrolled on the tape, so gradients flow
//! through every iteration including the coupling softmax.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Op, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Epsilon added under the square root of every capsule norm.
pub const NORM_EPS: f64 = 1e-12;

pub fn squash(g: &mut Graph, s: Var, axis: usize) -> Result<Var> {
    g.squash(s, axis, NORM_EPS)
}

/// Lengths of the capsule vectors in a `[batch, capsules, dim]` tensor.
pub fn capsule_norms(g: &mut Graph, v: Var) -> Result<Var> {
    g.vector_norm(v, 2, NORM_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimaryCapsSpec {
    pub capsule_dim: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PrimaryCapsSpec {
    /// Convolution filters needed: one `capsule_dim` block per channel.
    pub fn filters(&self) -> usize {
        self.capsule_dim * self.channels
    }
}

/// Convolution, then regroup the output into capsules and squash each one.
///
/// Filters `[c·d, (c+1)·d)` form capsule channel `c`; every spatial position
/// of every channel is one capsule, ordered `(row, col, channel)`.
pub fn primary_capsules(
    g: &mut Graph,
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    spec: &PrimaryCapsSpec,
) -> Result<Var> {
    let filters = g.value(kernel).shape()[0];
    if spec.capsule_dim == 0 || !filters.is_multiple_of(spec.capsule_dim) {
        return Err(TensorError::invalid(
            "primary_capsules",
            format!(
                "{filters} conv filters not divisible by capsule_dim {}",
                spec.capsule_dim
            ),
        ));
    }
    if filters != spec.filters() {
        return Err(TensorError::shape(
            "primary_capsules",
            spec.filters(),
            filters,
        ));
    }
    let mut y = g.conv2d(x, kernel, spec.stride, spec.pad)?;
    if let Some(b) = bias {
        y = g.bias_add(y, b)?;
    }
    let &[n, _, h, w] = g.value(y).shape() else {
        unreachable!("conv2d output is 4-d")
    };
    let nhwc = g.permute(y, &[0, 2, 3, 1])?;
    let caps = g.reshape(nhwc, &[n, h * w * spec.channels, spec.capsule_dim])?;
    squash(g, caps, 2)
}

/// Logit update used by routing-by-agreement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementKind {
    /// Unnormalised inner product `⟨û, v⟩`.
    #[default]
    Dot,
    /// Cosine similarity between `û` and `v`.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingConfig {
    pub iters: usize,
    #[serde(default)]
    pub agreement: AgreementKind,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            iters: 3,
            agreement: AgreementKind::Dot,
        }
    }
}

/// Shape of a routed capsule layer; the transforms `W: [I, J, d_out, d_in]`
/// are supplied per call so they can live in any parameter store.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapsuleLayer {
    pub in_caps: usize,
    pub out_caps: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub routing: RoutingConfig,
}

/// Output of [`CapsuleLayer::forward_traced`].
pub struct RoutingTrace {
    pub output: Var,
    /// Coupling coefficients `[B, I, J]` used at each iteration.
    pub couplings: Vec<Var>,
}

impl CapsuleLayer {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.in_caps, self.out_caps, self.out_dim, self.in_dim]
    }

    pub fn forward(&self, g: &mut Graph, u: Var, w: Var) -> Result<Var> {
        self.forward_traced(g, u, w).map(|t| t.output)
    }

    /// Routing-by-agreement:
    ///
    /// ```text
    /// û[j|i] = W[i,j] u[i];  b = 0
    /// repeat iters: c = softmax_j(b); s[j] = Σ_i c[i,j] û[j|i]; v = squash(s); b += agree(û, v)
    /// ```
    ///
    /// The final logit update is skipped since it cannot affect `v`.
    pub fn forward_traced(&self, g: &mut Graph, u: Var, w: Var) -> Result<RoutingTrace> {
        if self.routing.iters == 0 {
            return Err(TensorError::invalid(
                "routed_capsule_layer",
                "routing iterations must be at least 1",
            ));
        }
        let ws = g.value(w).shape();
        if ws != self.weight_shape() {
            return Err(TensorError::shape(
                "routed_capsule_layer",
                self.weight_shape(),
                ws,
            ));
        }
        let us = g.value(u).shape();
        if us.len() != 3 || us[1] != self.in_caps || us[2] != self.in_dim {
            return Err(TensorError::shape(
                "routed_capsule_layer",
                [
                    "B".to_string(),
                    self.in_caps.to_string(),
                    self.in_dim.to_string(),
                ],
                us,
            ));
        }
        let batch = us[0];
        let u_hat = g.apply(Op::CapsulePredict, &[u, w])?;
        let mut logits = g.constant(Tensor::zeros(&[batch, self.in_caps, self.out_caps]));
        let mut couplings = Vec::with_capacity(self.routing.iters);
        let agree = match self.routing.agreement {
            AgreementKind::Dot => Op::Agreement {
                cosine: false,
                eps: NORM_EPS,
            },
            AgreementKind::Cosine => Op::Agreement {
                cosine: true,
                eps: NORM_EPS,
            },
        };
        let mut v = None;
        for it in 0..self.routing.iters {
            let c = g.softmax(logits, 2)?;
            couplings.push(c);
            let s = g.apply(Op::RouteCombine, &[c, u_hat])?;
            let out = squash(g, s, 2)?;
            v = Some(out);
            if it + 1 < self.routing.iters {
                let a = g.apply(agree.clone(), &[u_hat, out])?;
                logits = g.add(logits, a)?;
            }
        }
        Ok(RoutingTrace {
            output: v.expect("at least one iteration"),
            couplings,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginLossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginLossConfig {
    fn default() -> Self {
        MarginLossConfig {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
        }
    }
}

impl MarginLossConfig {
    pub fn validate(&self) -> Result<()> {
        if 0.0 < self.m_minus
            && self.m_minus < self.m_plus
            && self.m_plus < 1.0
            && self.lambda > 0.0
        {
            Ok(())
        } else {
            Err(TensorError::invalid(
                "margin_loss",
                format!("invalid margins {self:?}"),
            ))
        }
    }
}

/// Batch mean of `Σ_k T·max(0, m⁺−‖v‖)² + λ(1−T)·max(0, ‖v‖−m⁻)²`.
///
/// `norms` is `[B, K]` capsule lengths, `targets` the same shape with
/// entries in `{0, 1}`.
pub fn margin_loss(
    g: &mut Graph,
    norms: Var,
    targets: &Tensor,
    cfg: &MarginLossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let shape = g.value(norms).shape().to_vec();
    if shape.len() != 2 || targets.shape() != shape.as_slice() {
        return Err(TensorError::shape("margin_loss", &shape, targets.shape()));
    }
    if let Some(bad) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(TensorError::invalid(
            "margin_loss",
            format!("targets must be 0 or 1, got {bad}"),
        ));
    }
    let present = g.constant(targets.clone());
    let absent = g.constant(targets.map(|t| cfg.lambda * (1.0 - t)));

    let short = g.affine(norms, -1.0, cfg.m_plus)?;
    let short = g.max_with_scalar(short, 0.0)?;
    let short = g.square(short)?;
    let pos = g.mul(short, present)?;

    let over = g.affine(norms, 1.0, -cfg.m_minus)?;
    let over = g.max_with_scalar(over, 0.0)?;
    let over = g.square(over)?;
    let neg = g.mul(over, absent)?;

    let per_class = g.add(pos, neg)?;
    let per_sample = g.sum(per_class, Some(1))?;
    g.mean(per_sample, None)
}

/// Targets tensor `[batch, classes]` filled with one value.
pub fn uniform_targets(batch: usize, classes: usize, value: f64) -> Tensor {
    Tensor::full(&[batch, classes], value)
}
