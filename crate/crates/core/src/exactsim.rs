//! Exact-distribution dynamics of positive and negative sample reinforcement.
//!
//! Over the full fixed-length space the reward-weighted likelihood splits as
//! `J = J_psr - J_nsr`, with `J_psr` the mass on correct responses and
//! `J_nsr` the mass on incorrect ones. Every flow here is an exact ascent
//! step on an expected objective of the form
//!
//! ```text
//! grad = sum_y pi(y) w(y) grad ln pi(y)
//! ```
//!
//! where the per-sequence weight `w(y)` is
//!
//! | mode            | `y` correct | `y` incorrect |
//! |-----------------|-------------|---------------|
//! | `PsrOnly`       | `1`         | `0`           |
//! | `NsrOnly`       | `0`         | `-1`          |
//! | `Weighted(l)`   | `l`         | `-1`          |
//! | `GrpoExpected`  | `E[A+]`     | `E[A-]`       |
//! | `AgpoExpected`  | `E[A+]`     | `E[A-]`       |
//!
//! For the group estimators the weight is the sampled algorithm's advantage
//! averaged over the group composition, conditioned on the sample's own
//! outcome. With `p` the exact correct mass and `G` the group size, the
//! other `G - 1` members contribute `j ~ Binomial(G - 1, p)` correct answers:
//!
//! ```text
//! E[A+] = sum_j Binom(G-1, p)(j) * A_pos(k = j + 1)
//! E[A-] = sum_j Binom(G-1, p)(j) * A_neg(k = j)
//! ```
//!
//! Since `J_psr + J_nsr = 1`, the exact `PsrOnly` and `NsrOnly` gradients
//! coincide; the two modes only separate under sampling.

use serde::{Deserialize, Serialize};

use crate::advantage::{class_advantages, EstimatorConfig, EstimatorVariant};
use crate::envs::{prior_correctness_at, TaskSpec, TaskSuite};
use crate::policy::{Params, TabularPolicy};
use crate::{LabError, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecompositionReport<F> {
    pub j_psr: F,
    pub j_nsr: F,
    pub j_total: F,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "lambda", rename_all = "snake_case")]
pub enum FlowMode<F> {
    PsrOnly,
    NsrOnly,
    Weighted(F),
    GrpoExpected,
    AgpoExpected,
}

impl<F: Scalar> std::str::FromStr for FlowMode<F> {
    type Err = LabError;

    /// `psr`, `nsr`, `weighted:<lambda>`, `grpo`, `agpo`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "psr" | "psr_only" => Ok(FlowMode::PsrOnly),
            "nsr" | "nsr_only" => Ok(FlowMode::NsrOnly),
            "grpo" | "grpo_expected" => Ok(FlowMode::GrpoExpected),
            "agpo" | "agpo_expected" => Ok(FlowMode::AgpoExpected),
            other => {
                let lambda = other
                    .strip_prefix("weighted:")
                    .and_then(|l| l.parse::<f64>().ok())
                    .ok_or_else(|| LabError::InvalidConfig(format!("unknown flow mode '{s}'")))?;
                if !(lambda > 0.0) {
                    return Err(LabError::InvalidConfig(
                        "weighted flow needs lambda > 0".into(),
                    ));
                }
                Ok(FlowMode::Weighted(F::lit(lambda)))
            }
        }
    }
}

/// Constants shared by the flows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConfig<F> {
    /// Temperature of the distribution that is differentiated.
    pub temperature: F,
    /// Group size of the expected GRPO/AGPO flows.
    pub group_size: usize,
    /// Constants (`delta`, `r_floor`, `eps_std`) of the expected flows.
    pub estimator: EstimatorConfig<F>,
}

impl<F: Scalar> Default for FlowConfig<F> {
    fn default() -> Self {
        Self {
            temperature: F::one(),
            group_size: 8,
            estimator: EstimatorConfig::agpo(),
        }
    }
}

pub fn psr_nsr_decomposition<F: Scalar>(
    policy: &TabularPolicy<F>,
    task: &TaskSpec,
) -> Result<DecompositionReport<F>> {
    task.check_policy(policy)?;
    let probs = policy.sequence_probabilities(F::one());
    let mut j_psr = F::zero();
    let mut j_nsr = F::zero();
    for (&p, &c) in probs.iter().zip(task.correct_mask()) {
        if c {
            j_psr = j_psr + p;
        } else {
            j_nsr = j_nsr + p;
        }
    }
    Ok(DecompositionReport {
        j_psr,
        j_nsr,
        j_total: j_psr - j_nsr,
    })
}

/// `Binomial(n, p)` probabilities for `0..=n`.
pub fn binomial_pmf<F: Scalar>(n: usize, p: F) -> Vec<F> {
    let mut out = vec![F::zero(); n + 1];
    if p <= F::zero() {
        out[0] = F::one();
        return out;
    }
    if p >= F::one() {
        out[n] = F::one();
        return out;
    }
    let (lp, lq) = (p.ln(), (F::one() - p).ln());
    let mut ln_choose = F::zero();
    for (j, slot) in out.iter_mut().enumerate() {
        if j > 0 {
            ln_choose = ln_choose + F::from_count(n - j + 1).ln() - F::from_count(j).ln();
        }
        *slot = (ln_choose + F::from_count(j) * lp + F::from_count(n - j) * lq).exp();
    }
    out
}

/// Expected advantage of a correct and of an incorrect sample for the group
/// estimator `cfg` when each sample is correct with probability `p`.
pub fn expected_class_advantages<F: Scalar>(
    p: F,
    group_size: usize,
    cfg: &EstimatorConfig<F>,
) -> Result<(F, F)> {
    if group_size < 2 {
        return Err(LabError::InvalidGroup(format!(
            "group size {group_size} < 2"
        )));
    }
    let pmf = binomial_pmf(group_size - 1, p);
    let mut pos = F::zero();
    let mut neg = F::zero();
    for (j, &w) in pmf.iter().enumerate() {
        if w == F::zero() {
            continue;
        }
        let (a_pos, _) = class_advantages(group_size, j + 1, cfg)?;
        let (_, a_neg) = class_advantages(group_size, j, cfg)?;
        pos = pos + w * a_pos.expect("k >= 1 has a positive class");
        neg = neg + w * a_neg.expect("k < G has a negative class");
    }
    Ok((pos, neg))
}

/// Per-sequence weights `(correct, incorrect)` of a flow at the policy's
/// current correct mass.
fn flow_weights<F: Scalar>(
    policy: &TabularPolicy<F>,
    task: &TaskSpec,
    mode: FlowMode<F>,
    cfg: &FlowConfig<F>,
) -> Result<(F, F)> {
    Ok(match mode {
        FlowMode::PsrOnly => (F::one(), F::zero()),
        FlowMode::NsrOnly => (F::zero(), -F::one()),
        FlowMode::Weighted(lambda) => {
            if !(lambda > F::zero()) {
                return Err(LabError::InvalidConfig(
                    "weighted flow needs lambda > 0".into(),
                ));
            }
            (lambda, -F::one())
        }
        FlowMode::GrpoExpected | FlowMode::AgpoExpected => {
            let variant = if matches!(mode, FlowMode::GrpoExpected) {
                EstimatorVariant::Grpo
            } else {
                EstimatorVariant::Agpo
            };
            let est = EstimatorConfig {
                variant,
                ..cfg.estimator
            };
            let p = prior_correctness_at(policy, task, cfg.temperature)?;
            expected_class_advantages(p, cfg.group_size, &est)?
        }
    })
}

/// Exact expected-objective gradient of a flow with respect to the logits.
pub fn exact_gradient<F: Scalar>(
    policy: &TabularPolicy<F>,
    task: &TaskSpec,
    mode: FlowMode<F>,
    cfg: &FlowConfig<F>,
) -> Result<Params<F>> {
    task.check_policy(policy)?;
    let (w_pos, w_neg) = flow_weights(policy, task, mode, cfg)?;
    let temperature = cfg.temperature;
    let (_, seq_probs) = policy.reach_probabilities(temperature);
    let n_ctx = policy.num_contexts();
    let vocab = policy.vocab();

    // subtree sums of pi(y) w(y), leaves first
    let mut mass = vec![F::zero(); n_ctx + seq_probs.len()];
    for (i, (&p, &c)) in seq_probs.iter().zip(task.correct_mask()).enumerate() {
        mass[n_ctx + i] = p * if c { w_pos } else { w_neg };
    }
    for ctx in (0..n_ctx).rev() {
        mass[ctx] = (0..vocab).map(|v| mass[policy.child(ctx, v)]).sum();
    }

    let mut grad = policy.zeros_like();
    for ctx in 0..n_ctx {
        if mass[ctx] == F::zero() && (0..vocab).all(|v| mass[policy.child(ctx, v)] == F::zero()) {
            continue;
        }
        let dist = policy.distribution(ctx, temperature);
        let total = mass[ctx];
        for (v, &pv) in dist.iter().enumerate() {
            let i = ctx * vocab + v;
            grad.values_mut()[i] = (mass[policy.child(ctx, v)] - pv * total) / temperature;
        }
    }
    Ok(grad)
}

/// One exact ascent step.
pub fn exact_gradient_step<F: Scalar>(
    policy: &TabularPolicy<F>,
    task: &TaskSpec,
    mode: FlowMode<F>,
    cfg: &FlowConfig<F>,
    learning_rate: F,
) -> Result<TabularPolicy<F>> {
    if !(learning_rate > F::zero()) {
        return Err(LabError::InvalidConfig(
            "learning rate must be positive".into(),
        ));
    }
    let grad = exact_gradient(policy, task, mode, cfg)?;
    policy.apply_update(&grad, learning_rate)
}

/// `1 - (1 - p)^k` for each `k`, with `p` the exact correct mass.
pub fn exact_passk_curve<F: Scalar>(
    policy: &TabularPolicy<F>,
    task: &TaskSpec,
    ks: &[u64],
) -> Result<Vec<F>> {
    let p = prior_correctness_at(policy, task, F::one())?;
    Ok(ks.iter().map(|&k| passk_from_p(p, k)).collect())
}

pub fn passk_from_p<F: Scalar>(p: F, k: u64) -> F {
    let miss = (F::one() - p).max(F::zero());
    F::one() - miss.powf(F::lit(k as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DampeningEntry<F> {
    pub position: usize,
    pub pi_chosen: F,
    /// `|d(-ln pi(y)) / d logit[chosen]|` at this position.
    pub magnitude: F,
}

/// Reports, per position of `sequence`, the chosen token's probability and
/// the magnitude of the negative-sample gradient on its logit. Fails if the
/// magnitude differs from `1 - pi` by more than `1e-12`.
pub fn nsr_dampening_probe<F: Scalar>(
    policy: &TabularPolicy<F>,
    sequence: &[usize],
) -> Result<Vec<DampeningEntry<F>>> {
    let mut grad = policy.grad_sequence_logprob(sequence)?;
    grad.scale(-F::one());
    let contexts = policy.contexts_of(sequence);
    let tol = F::lit(1e-12);
    contexts
        .iter()
        .zip(sequence)
        .enumerate()
        .map(|(position, (&ctx, &tok))| {
            let pi_chosen = policy.distribution(ctx, F::one())[tok];
            let magnitude = grad.get(ctx, tok).abs();
            let expected = F::one() - pi_chosen;
            if (magnitude - expected).abs() > tol {
                return Err(LabError::ProbeViolation {
                    position,
                    magnitude: magnitude.as_f64(),
                    expected: expected.as_f64(),
                });
            }
            Ok(DampeningEntry {
                position,
                pi_chosen,
                magnitude,
            })
        })
        .collect()
}

/// Suite-averaged observables of one simulation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimRecord<F> {
    pub step: usize,
    pub j_psr: F,
    pub j_nsr: F,
    pub passk_1: F,
    pub passk_16: F,
    pub passk_256: F,
    pub entropy: F,
}

pub const SIM_CSV_HEADER: &str = "step,j_psr,j_nsr,passk_1,passk_16,passk_256,entropy";

impl<F: Scalar> SimRecord<F> {
    pub fn csv_row(&self) -> String {
        use crate::numfmt::sig7;
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            sig7(self.j_psr.as_f64()),
            sig7(self.j_nsr.as_f64()),
            sig7(self.passk_1.as_f64()),
            sig7(self.passk_16.as_f64()),
            sig7(self.passk_256.as_f64()),
            sig7(self.entropy.as_f64()),
        )
    }
}

pub fn observe<F: Scalar>(
    step: usize,
    policies: &[TabularPolicy<F>],
    suite: &TaskSuite,
) -> Result<SimRecord<F>> {
    let n = F::from_count(suite.len());
    let mut rec = SimRecord {
        step,
        j_psr: F::zero(),
        j_nsr: F::zero(),
        passk_1: F::zero(),
        passk_16: F::zero(),
        passk_256: F::zero(),
        entropy: F::zero(),
    };
    for (policy, task) in policies.iter().zip(suite.tasks()) {
        let d = psr_nsr_decomposition(policy, task)?;
        rec.j_psr = rec.j_psr + d.j_psr / n;
        rec.j_nsr = rec.j_nsr + d.j_nsr / n;
        rec.passk_1 = rec.passk_1 + passk_from_p(d.j_psr, 1) / n;
        rec.passk_16 = rec.passk_16 + passk_from_p(d.j_psr, 16) / n;
        rec.passk_256 = rec.passk_256 + passk_from_p(d.j_psr, 256) / n;
        rec.entropy = rec.entropy + policy.mean_token_entropy() / n;
    }
    Ok(rec)
}

/// Per-step records and the final policies.
pub type SimOutcome<F> = (Vec<SimRecord<F>>, Vec<TabularPolicy<F>>);

/// Runs `steps` exact flow steps on every prompt of the suite, returning the
/// records for steps `0..=steps` and the final policies.
pub fn simulate_suite<F: Scalar>(
    mut policies: Vec<TabularPolicy<F>>,
    suite: &TaskSuite,
    mode: FlowMode<F>,
    cfg: &FlowConfig<F>,
    learning_rate: F,
    steps: usize,
) -> Result<SimOutcome<F>> {
    if policies.len() != suite.len() {
        return Err(LabError::Shape(format!(
            "{} policies for {} tasks",
            policies.len(),
            suite.len()
        )));
    }
    let mut records = vec![observe(0, &policies, suite)?];
    for step in 1..=steps {
        for (policy, task) in policies.iter_mut().zip(suite.tasks()) {
            *policy = exact_gradient_step(policy, task, mode, cfg, learning_rate)
                .map_err(|e| e.at_step(step))?;
        }
        records.push(observe(step, &policies, suite)?);
    }
    Ok((records, policies))
}
