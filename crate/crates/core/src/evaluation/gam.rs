use serde::{Deserialize, Serialize};

use crate::gan::GanModel;
use crate::tensor::Tensor;

use super::{EvalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GamConfig {
    pub n_samples: usize,
    /// `|r_test - 1|` at or below this counts as `r_test ≃ 1`.
    pub tie_tolerance: f64,
    /// Scores at or above the threshold are classified real.
    pub threshold: f64,
}

impl Default for GamConfig {
    fn default() -> Self {
        GamConfig {
            n_samples: 10_000,
            tie_tolerance: 0.05,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Model1Wins,
    Model2Wins,
    Tie,
}

impl Verdict {
    pub fn flipped(self) -> Self {
        match self {
            Verdict::Model1Wins => Verdict::Model2Wins,
            Verdict::Model2Wins => Verdict::Model1Wins,
            Verdict::Tie => Verdict::Tie,
        }
    }
}

/// One battle between `M1 = (G1, D1)` and `M2 = (G2, D2)`.
///
/// ```text
/// r_samples = A(D1(G2(z))) / A(D2(G1(z)))    fakes: score <  threshold is correct
/// r_test    = A(D1(x_test)) / A(D2(x_test))  reals: score >= threshold is correct
/// ```
///
/// Model 2 wins when G2 fools D1 more often than G1 fools D2
/// (`r_samples < 1`) while both discriminators are about equally accurate on
/// real data (`|r_test - 1| <= tie_tolerance`). Model 1 wins in the mirrored
/// case `r_samples > 1`. Anything else is a tie.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamReport {
    pub orientation: String,
    pub r_samples: f64,
    pub r_test: f64,
    pub acc_d1_on_g2: f64,
    pub acc_d2_on_g1: f64,
    pub acc_d1_on_test: f64,
    pub acc_d2_on_test: f64,
    pub verdict: Verdict,
    pub n_samples: usize,
    pub n_test: usize,
    pub tie_tolerance: f64,
    pub threshold: f64,
    pub seed: u64,
}

/// Fraction of `scores` classified as `real` (true) or generated (false).
pub fn score_accuracy(scores: &[f64], real: bool, threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = scores.iter().filter(|&&s| (s >= threshold) == real).count();
    Ok(hits as f64 / scores.len() as f64)
}

fn ratio(num: f64, den: f64, which: &'static str) -> Result<f64> {
    if den == 0.0 {
        return Err(EvalError::DegenerateBattle { which });
    }
    Ok(num / den)
}

/// Battle `m1` against `m2`. Both generators draw their latents from the
/// same `seed`, so a model battling itself ties exactly.
///
/// `test_images` are real held-out images in `[-1, 1]`.
pub fn gam_battle(
    m1: &GanModel,
    m2: &GanModel,
    test_images: &Tensor,
    cfg: &GamConfig,
    seed: u64,
) -> Result<GamReport> {
    let (s1, s2) = (m1.config.image_shape(), m2.config.image_shape());
    if s1 != s2 {
        return Err(EvalError::ShapeMismatch {
            left: s1,
            right: s2,
        });
    }
    if cfg.n_samples == 0 {
        return Err(EvalError::Config("n_samples must be positive".into()));
    }
    if cfg.tie_tolerance.is_nan() || cfg.tie_tolerance < 0.0 {
        return Err(EvalError::Config(
            "tie_tolerance must be non-negative".into(),
        ));
    }
    let g1 = m1.generate(cfg.n_samples, seed)?;
    let g2 = m2.generate(cfg.n_samples, seed)?;
    let acc_d1_on_g2 = score_accuracy(&m1.discriminate(&g2)?, false, cfg.threshold)?;
    let acc_d2_on_g1 = score_accuracy(&m2.discriminate(&g1)?, false, cfg.threshold)?;
    let acc_d1_on_test = score_accuracy(&m1.discriminate(test_images)?, true, cfg.threshold)?;
    let acc_d2_on_test = score_accuracy(&m2.discriminate(test_images)?, true, cfg.threshold)?;
    report_from_accuracies(
        [acc_d1_on_g2, acc_d2_on_g1, acc_d1_on_test, acc_d2_on_test],
        cfg,
        test_images.shape()[0],
        seed,
    )
}

fn report_from_accuracies(
    acc: [f64; 4],
    cfg: &GamConfig,
    n_test: usize,
    seed: u64,
) -> Result<GamReport> {
    let [acc_d1_on_g2, acc_d2_on_g1, acc_d1_on_test, acc_d2_on_test] = acc;
    let r_samples = ratio(acc_d1_on_g2, acc_d2_on_g1, "A(D2(G1(z)))")?;
    let r_test = ratio(acc_d1_on_test, acc_d2_on_test, "A(D2(x_test))")?;
    let even = (r_test - 1.0).abs() <= cfg.tie_tolerance;
    let verdict = if even && r_samples < 1.0 {
        Verdict::Model2Wins
    } else if even && r_samples > 1.0 {
        Verdict::Model1Wins
    } else {
        Verdict::Tie
    };
    Ok(GamReport {
        orientation: "r_samples = A(D1(G2(z)))/A(D2(G1(z))), r_test = A(D1(x))/A(D2(x))".into(),
        r_samples,
        r_test,
        acc_d1_on_g2,
        acc_d2_on_g1,
        acc_d1_on_test,
        acc_d2_on_test,
        verdict,
        n_samples: cfg.n_samples,
        n_test,
        tie_tolerance: cfg.tie_tolerance,
        threshold: cfg.threshold,
        seed,
    })
}

/// Both orientations of one battle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamComparison {
    pub forward: GamReport,
    pub reverse: GamReport,
}

/// Runs the battle once and derives the swapped orientation from the same
/// four accuracies, so `reverse` is exactly `forward` with the roles
/// exchanged.
pub fn gam_both(
    m1: &GanModel,
    m2: &GanModel,
    test_images: &Tensor,
    cfg: &GamConfig,
    seed: u64,
) -> Result<GamComparison> {
    let forward = gam_battle(m1, m2, test_images, cfg, seed)?;
    let reverse = report_from_accuracies(
        [
            forward.acc_d2_on_g1,
            forward.acc_d1_on_g2,
            forward.acc_d2_on_test,
            forward.acc_d1_on_test,
        ],
        cfg,
        forward.n_test,
        seed,
    )?;
    Ok(GamComparison { forward, reverse })
}
