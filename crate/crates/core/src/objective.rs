//! Clipped surrogate objective with an exact per-token KL penalty.
//!
//! The objective is returned for maximisation:
//!
//! ```text
//! J = 1/N sum_i w_i sum_t [ min(rho_it A_i, clip(rho_it, 1-eps, 1+eps) A_i) - beta KL_it ]
//! ```
//!
//! with `w_i = 1/|y_i|` under [`LengthNorm::PerTokenMean`] and `w_i = 1` under
//! [`LengthNorm::SequenceSum`]. `rho_it` is the ratio of the current to the
//! sampling policy on token `t`, both at the sampling temperature, and
//! `KL_it` is the exact KL divergence between the current and reference
//! token distributions at that token's context.

use serde::{Deserialize, Serialize};

use crate::policy::{Params, TabularPolicy, Trajectory};
use crate::{LabError, Result, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthNorm {
    #[default]
    PerTokenMean,
    SequenceSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    deny_unknown_fields,
    bound(deserialize = "F: Scalar + Deserialize<'de>")
)]
pub struct ClipConfig<F> {
    #[serde(default = "default_epsilon")]
    pub epsilon: F,
    #[serde(default = "F::zero")]
    pub kl_coeff: F,
    #[serde(default)]
    pub length_norm: LengthNorm,
}

fn default_epsilon<F: Scalar>() -> F {
    F::lit(0.2)
}

impl<F: Scalar> Default for ClipConfig<F> {
    fn default() -> Self {
        Self {
            epsilon: default_epsilon(),
            kl_coeff: F::zero(),
            length_norm: LengthNorm::PerTokenMean,
        }
    }
}

impl<F: Scalar> ClipConfig<F> {
    pub fn with_kl(mut self, kl_coeff: F) -> Self {
        self.kl_coeff = kl_coeff;
        self
    }

    pub fn with_epsilon(mut self, epsilon: F) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > F::zero() && self.epsilon < F::one()) {
            return Err(LabError::InvalidConfig(format!(
                "clip epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.kl_coeff >= F::zero()) {
            return Err(LabError::InvalidConfig(format!(
                "kl_coeff must be >= 0, got {}",
                self.kl_coeff
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateReport<F> {
    pub objective_value: F,
    /// Share of tokens where the clipped branch is strictly smaller.
    pub clip_fraction: F,
    pub mean_kl: F,
    /// Gradient of `objective_value` with respect to the current logits.
    pub gradient: Params<F>,
    pub tokens: usize,
}

/// `min(rho * adv, clip(rho, 1 - eps, 1 + eps) * adv)`.
pub fn clipped_term<F: Scalar>(ratio: F, advantage: F, eps: F) -> Result<F> {
    if !(ratio > F::zero()) {
        return Err(LabError::InvalidRatio(ratio.as_f64()));
    }
    Ok(clip_branches(ratio, advantage, eps).0)
}

/// `(value, clipped_branch_active)`.
fn clip_branches<F: Scalar>(ratio: F, advantage: F, eps: F) -> (F, bool) {
    let clipped_ratio = ratio.max(F::one() - eps).min(F::one() + eps);
    let unclipped = ratio * advantage;
    let clipped = clipped_ratio * advantage;
    if clipped < unclipped {
        (clipped, true)
    } else {
        (unclipped, false)
    }
}

/// `sum_v p(v) ln(p(v) / q(v))` over the whole vocabulary.
pub fn exact_token_kl<F: Scalar>(p: &[F], q: &[F]) -> Result<F> {
    if p.len() != q.len() {
        return Err(LabError::Alignment(format!(
            "distributions over {} and {} tokens",
            p.len(),
            q.len()
        )));
    }
    let mut kl = F::zero();
    for (index, (&pv, &qv)) in p.iter().zip(q).enumerate() {
        if pv > F::zero() {
            if !(qv > F::zero()) {
                return Err(LabError::SupportMismatch { index });
            }
            kl = kl + pv * (pv.ln() - qv.ln());
        }
    }
    Ok(kl)
}

/// KL divergence and its gradient with respect to the logits of `p`, where
/// `p = softmax(logits / temperature)`.
fn kl_with_grad<F: Scalar>(logp: &[F], logq: &[F], temperature: F) -> (F, Vec<F>) {
    let kl: F = logp
        .iter()
        .zip(logq)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum();
    let grad = logp
        .iter()
        .zip(logq)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq - kl) / temperature)
        .collect();
    (kl, grad)
}

/// Evaluates the surrogate over one batch of trajectories with their
/// sequence-level advantages.
///
/// Old log-probabilities come from each trajectory's sampling record; the
/// current and reference distributions are evaluated at `temperature`.
pub fn sequence_objective<F: Scalar>(
    trajectories: &[Trajectory<F>],
    advantages: &[F],
    current: &TabularPolicy<F>,
    reference: &TabularPolicy<F>,
    temperature: F,
    cfg: &ClipConfig<F>,
) -> Result<SurrogateReport<F>> {
    cfg.validate()?;
    if trajectories.len() != advantages.len() {
        return Err(LabError::Alignment(format!(
            "{} trajectories but {} advantages",
            trajectories.len(),
            advantages.len()
        )));
    }
    if trajectories.is_empty() {
        return Err(LabError::EmptyInput("no trajectories".into()));
    }
    if reference.vocab() != current.vocab() || reference.seq_len() != current.seq_len() {
        return Err(LabError::Shape(
            "reference and current policies differ in shape".into(),
        ));
    }
    let n = F::from_count(trajectories.len());
    let mut objective = F::zero();
    let mut gradient = current.zeros_like();
    let mut clipped = 0usize;
    let mut tokens = 0usize;
    let mut kl_total = F::zero();

    for (i, (traj, &adv)) in trajectories.iter().zip(advantages).enumerate() {
        if traj.per_token_logprob_old.len() != traj.tokens.len() {
            return Err(LabError::Alignment(format!(
                "trajectory {i}: {} tokens but {} old log-probs",
                traj.tokens.len(),
                traj.per_token_logprob_old.len()
            )));
        }
        if traj.tokens.len() != current.seq_len() {
            return Err(LabError::Alignment(format!(
                "trajectory {i}: length {} but policy length {}",
                traj.tokens.len(),
                current.seq_len()
            )));
        }
        current.check_tokens(&traj.tokens)?;
        let weight = match cfg.length_norm {
            LengthNorm::PerTokenMean => F::one() / (n * F::from_count(traj.tokens.len())),
            LengthNorm::SequenceSum => F::one() / n,
        };
        let contexts = current.contexts_of(&traj.tokens);
        for ((&ctx, &tok), &old) in contexts
            .iter()
            .zip(&traj.tokens)
            .zip(&traj.per_token_logprob_old)
        {
            let logp = current.log_distribution(ctx, temperature);
            let ratio = (logp[tok] - old).exp();
            let (value, is_clipped) = clip_branches(ratio, adv, cfg.epsilon);
            tokens += 1;
            if is_clipped {
                clipped += 1;
            } else {
                // d(rho A)/d logits = A rho d ln pi / d logits
                current.accumulate_score(
                    &mut gradient,
                    ctx,
                    tok,
                    temperature,
                    weight * adv * ratio,
                );
            }
            let logq = reference.log_distribution(ctx, temperature);
            let (kl, kl_grad) = kl_with_grad(&logp, &logq, temperature);
            kl_total = kl_total + kl;
            objective = objective + weight * (value - cfg.kl_coeff * kl);
            if cfg.kl_coeff > F::zero() {
                let scale = weight * cfg.kl_coeff;
                let vocab = current.vocab();
                for (w, g) in kl_grad.iter().enumerate() {
                    let slot = &mut gradient.values_mut()[ctx * vocab + w];
                    *slot = *slot - scale * *g;
                }
            }
        }
    }

    let count = F::from_count(tokens);
    Ok(SurrogateReport {
        objective_value: objective,
        clip_fraction: F::from_count(clipped) / count,
        mean_kl: (kl_total / count).max(F::zero()),
        gradient,
        tokens,
    })
}
