//! The sampled training loop.
//!
//! Every prompt owns a disjoint tabular policy, so a "model" is the vector of
//! per-prompt policies. One step:
//!
//! 1. pick the step's prompt batch from a seeded per-epoch permutation;
//! 2. sample `G` responses per prompt from the snapshot policies, each member
//!    on its own stream keyed by `(seed, step, prompt_id, member)`;
//! 3. verify and sign-map the rewards, compute group advantages;
//! 4. for each epoch and mini-batch, ascend the clipped surrogate of each
//!    prompt's group (trajectory mean within the group);
//! 5. every `eval_every` steps (and at the last step) measure held-out greedy
//!    accuracy and mean token entropy.
//!
//! The reference policies for the KL term are the initial policies.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{estimate, EstimatorConfig, EstimatorVariant, GroupRewards, RewardSign};
use crate::envs::{TaskSpec, TaskSuite};
use crate::evalkit::{passk_unbiased, PasskQuery};
use crate::numfmt::sig7;
use crate::objective::{sequence_objective, ClipConfig};
use crate::policy::{PolicyInit, TabularPolicy, Trajectory};
use crate::seeding::{fnv1a, rollout_stream, stream};
use crate::{LabError, Result, Scalar};

const TAG_INIT: u64 = 0x696e_6974;
const TAG_BATCH: u64 = 0x6261_7463;
const TAG_EVAL: u64 = 0x6576_616c;

pub const TELEMETRY_HEADER: &str =
    "step,train_correct_ratio,heldout_greedy_acc,mean_entropy,mean_abs_adv_pos,mean_abs_adv_neg,mean_kl,clip_fraction";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    deny_unknown_fields,
    bound(deserialize = "F: Scalar + Deserialize<'de>")
)]
pub struct TrainConfig<F> {
    #[serde(default = "EstimatorConfig::agpo")]
    pub estimator: EstimatorConfig<F>,
    #[serde(default)]
    pub clip: ClipConfig<F>,
    #[serde(default = "defaults::group_size")]
    pub group_size: usize,
    #[serde(default = "defaults::batch_prompts")]
    pub batch_prompts: usize,
    #[serde(default = "defaults::mini_batch_prompts")]
    pub mini_batch_prompts: usize,
    #[serde(default = "defaults::temperature")]
    pub temperature: F,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: F,
    #[serde(default = "defaults::total_steps")]
    pub total_steps: usize,
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    /// Passes over each collected batch.
    #[serde(default = "defaults::epochs_per_batch")]
    pub epochs_per_batch: usize,
    /// Step size of the per-prompt value table used by `ppo_baseline`.
    #[serde(default = "defaults::critic_lr")]
    pub critic_lr: F,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: PolicyInit,
    /// Keep every sampled trajectory for the rollout log.
    #[serde(default)]
    pub log_rollouts: bool,
}

mod defaults {
    use crate::Scalar;

    pub fn group_size() -> usize {
        8
    }
    pub fn batch_prompts() -> usize {
        32
    }
    pub fn mini_batch_prompts() -> usize {
        8
    }
    pub fn temperature<F: Scalar>() -> F {
        F::lit(0.6)
    }
    pub fn learning_rate<F: Scalar>() -> F {
        F::lit(0.5)
    }
    pub fn total_steps() -> usize {
        100
    }
    pub fn eval_every() -> usize {
        10
    }
    pub fn epochs_per_batch() -> usize {
        1
    }
    pub fn critic_lr<F: Scalar>() -> F {
        F::lit(0.1)
    }
}

impl<F: Scalar> Default for TrainConfig<F> {
    fn default() -> Self {
        Self {
            estimator: EstimatorConfig::agpo(),
            clip: ClipConfig::default(),
            group_size: defaults::group_size(),
            batch_prompts: defaults::batch_prompts(),
            mini_batch_prompts: defaults::mini_batch_prompts(),
            temperature: defaults::temperature(),
            learning_rate: defaults::learning_rate(),
            total_steps: defaults::total_steps(),
            eval_every: defaults::eval_every(),
            epochs_per_batch: defaults::epochs_per_batch(),
            critic_lr: defaults::critic_lr(),
            seed: 0,
            init: PolicyInit::Uniform,
            log_rollouts: false,
        }
    }
}

impl<F: Scalar> TrainConfig<F> {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::InvalidConfig(m.to_string()));
        self.estimator.validate()?;
        self.clip.validate()?;
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.batch_prompts == 0 || self.mini_batch_prompts == 0 {
            return bad("batch sizes must be positive");
        }
        if !self.batch_prompts.is_multiple_of(self.mini_batch_prompts) {
            return bad("mini_batch_prompts must divide batch_prompts");
        }
        if !(self.temperature > F::zero()) || !self.temperature.is_finite() {
            return bad("temperature must be positive");
        }
        if !(self.learning_rate > F::zero()) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.eval_every == 0 || self.epochs_per_batch == 0 {
            return bad("eval_every and epochs_per_batch must be positive");
        }
        if !(self.critic_lr > F::zero() && self.critic_lr <= F::one()) {
            return bad("critic_lr must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup<F> {
    pub prompt_id: String,
    pub trajectories: Vec<Trajectory<F>>,
    pub group_rewards: GroupRewards,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TelemetryRecord<F> {
    pub step: usize,
    pub train_correct_ratio: F,
    pub heldout_greedy_acc: F,
    pub mean_entropy: F,
    pub mean_abs_adv_pos: F,
    pub mean_abs_adv_neg: F,
    pub mean_kl: F,
    pub clip_fraction: F,
}

impl<F: Scalar> TelemetryRecord<F> {
    pub fn csv_row(&self) -> String {
        let f = |x: F| sig7(x.as_f64());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            f(self.train_correct_ratio),
            f(self.heldout_greedy_acc),
            f(self.mean_entropy),
            f(self.mean_abs_adv_pos),
            f(self.mean_abs_adv_neg),
            f(self.mean_kl),
            f(self.clip_fraction)
        )
    }
}

pub fn telemetry_csv<F: Scalar>(records: &[TelemetryRecord<F>]) -> String {
    let mut out = String::from(TELEMETRY_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// One line of the rollout log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutLogRecord {
    pub step: usize,
    pub prompt_id: String,
    pub member: usize,
    pub tokens: Vec<usize>,
    pub logprob_old: f64,
    pub reward: RewardSign,
}

/// Samples `group_size` responses for each prompt index in `batch`.
///
/// Groups come back in `batch` order and members in index order whatever
/// the scheduling, because every member draws from its own stream.
pub fn collect_groups<F: Scalar>(
    policies: &[TabularPolicy<F>],
    suite: &TaskSuite,
    batch: &[usize],
    group_size: usize,
    temperature: F,
    root: u64,
    step: u64,
) -> Result<Vec<RolloutGroup<F>>> {
    if group_size < 2 {
        return Err(LabError::InvalidGroup(format!(
            "group size {group_size} < 2"
        )));
    }
    batch
        .par_iter()
        .map(|&i| {
            let task = suite
                .tasks()
                .get(i)
                .ok_or_else(|| LabError::Shape(format!("prompt index {i} outside the suite")))?;
            let policy = policies
                .get(i)
                .ok_or_else(|| LabError::Shape(format!("no policy for prompt index {i}")))?;
            task.check_policy(policy)?;
            let trajectories = (0..group_size)
                .into_par_iter()
                .map(|m| {
                    let mut rng = rollout_stream(root, step, task.prompt_id(), m as u64);
                    let mut traj = policy.sample_trajectory(temperature, &mut rng);
                    traj.reward = Some(RewardSign::from_verdict(task.verify(&traj.tokens)?));
                    Ok(traj)
                })
                .collect::<Result<Vec<_>>>()?;
            let rewards = trajectories
                .iter()
                .map(|t| t.reward.expect("set above"))
                .collect();
            Ok(RolloutGroup {
                prompt_id: task.prompt_id().to_string(),
                trajectories,
                group_rewards: GroupRewards::new(task.prompt_id(), rewards)?,
            })
        })
        .collect()
}

/// Initial policy of a prompt; `Peaked` inits anchor on the task's cluster
/// center when it has one.
pub fn initial_policy<F: Scalar>(
    init: &PolicyInit,
    task: &TaskSpec,
    seed: u64,
) -> Result<TabularPolicy<F>> {
    let mut rng = stream(seed, &[TAG_INIT, fnv1a(task.prompt_id().as_bytes())]);
    init.build(
        task.vocab(),
        task.seq_len(),
        task.prompt_id(),
        task.params().center.as_deref(),
        &mut rng,
    )
}

/// Greedy accuracy on `suite`, using the trained policy of a prompt when one
/// exists and a fresh initial policy otherwise.
fn greedy_accuracy<F: Scalar>(
    trained: &[TabularPolicy<F>],
    train_suite: &TaskSuite,
    heldout: &TaskSuite,
    init: &PolicyInit,
    seed: u64,
) -> Result<F> {
    let hits = heldout
        .tasks()
        .par_iter()
        .map(|task| {
            let pos = train_suite
                .tasks()
                .iter()
                .position(|t| t.prompt_id() == task.prompt_id());
            let verdict = match pos {
                Some(i) => task.verify(&trained[i].greedy_decode().tokens)?,
                None => task.verify(
                    &initial_policy::<F>(init, task, seed)?
                        .greedy_decode()
                        .tokens,
                )?,
            };
            Ok(verdict as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(F::from_count(hits.iter().sum()) / F::from_count(heldout.len()))
}

fn mean_entropy<F: Scalar>(policies: &[TabularPolicy<F>]) -> F {
    let total: F = policies.iter().map(|p| p.mean_token_entropy()).sum();
    total / F::from_count(policies.len())
}

/// Held-out accuracy and entropy at some point of training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSnapshot<F> {
    pub heldout_greedy_acc: F,
    pub mean_entropy: F,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    pub initial: EvalSnapshot<F>,
    pub telemetry: Vec<TelemetryRecord<F>>,
    pub policies: Vec<TabularPolicy<F>>,
    /// `(step, checkpoint text of every policy)`.
    pub checkpoints: Vec<(usize, String)>,
    pub rollouts: Vec<RolloutLogRecord>,
}

impl<F: Scalar> TrainOutcome<F> {
    /// Writes `telemetry.csv`, `checkpoints/step_NNNNNN.ckpt` and, when
    /// rollouts were kept, `rollouts.jsonl` into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        let ckpt_dir = dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir).map_err(|e| LabError::io(&ckpt_dir, e))?;
        write_file(&dir.join("telemetry.csv"), &telemetry_csv(&self.telemetry))?;
        for (step, text) in &self.checkpoints {
            write_file(&ckpt_dir.join(format!("step_{step:06}.ckpt")), text)?;
        }
        if !self.rollouts.is_empty() {
            let mut text = String::new();
            for r in &self.rollouts {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            write_file(&dir.join("rollouts.jsonl"), &text)?;
        }
        Ok(())
    }
}

pub(crate) fn write_file(path: &PathBuf, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

/// Step-by-step trainer over a fixed suite.
pub struct Trainer<'a, F> {
    cfg: TrainConfig<F>,
    suite: &'a TaskSuite,
    heldout: &'a TaskSuite,
    policies: Vec<TabularPolicy<F>>,
    reference: Vec<TabularPolicy<F>>,
    critic: Vec<F>,
    step: usize,
    last_eval: EvalSnapshot<F>,
    initial: EvalSnapshot<F>,
    checkpoints: Vec<(usize, String)>,
    rollouts: Vec<RolloutLogRecord>,
}

impl<'a, F: Scalar> Trainer<'a, F> {
    /// `heldout = None` evaluates greedy accuracy on the training suite.
    pub fn new(
        cfg: TrainConfig<F>,
        suite: &'a TaskSuite,
        heldout: Option<&'a TaskSuite>,
    ) -> Result<Self> {
        cfg.validate()?;
        if suite.is_empty() {
            return Err(LabError::EmptyInput("training suite has no tasks".into()));
        }
        if cfg.batch_prompts > suite.len() {
            return Err(LabError::InvalidConfig(format!(
                "batch_prompts {} exceeds the {} prompts of the suite",
                cfg.batch_prompts,
                suite.len()
            )));
        }
        let heldout = heldout.unwrap_or(suite);
        if heldout.is_empty() {
            return Err(LabError::EmptyInput("held-out suite has no tasks".into()));
        }
        let policies = suite
            .tasks()
            .iter()
            .map(|t| initial_policy(&cfg.init, t, cfg.seed))
            .collect::<Result<Vec<_>>>()?;
        let initial = EvalSnapshot {
            heldout_greedy_acc: greedy_accuracy(&policies, suite, heldout, &cfg.init, cfg.seed)?,
            mean_entropy: mean_entropy(&policies),
        };
        Ok(Self {
            critic: vec![F::zero(); suite.len()],
            reference: policies.clone(),
            policies,
            suite,
            heldout,
            step: 0,
            last_eval: initial,
            initial,
            checkpoints: Vec::new(),
            rollouts: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig<F> {
        &self.cfg
    }

    pub fn policies(&self) -> &[TabularPolicy<F>] {
        &self.policies
    }

    pub fn initial(&self) -> EvalSnapshot<F> {
        self.initial
    }

    /// Number of completed steps.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Prompt indices of 1-based `step`.
    pub fn batch_for_step(&self, step: usize) -> Vec<usize> {
        let n = self.suite.len();
        let per_epoch = n / self.cfg.batch_prompts;
        let epoch = (step - 1) / per_epoch;
        let slot = (step - 1) % per_epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(self.cfg.seed, &[TAG_BATCH, epoch as u64]));
        order[slot * self.cfg.batch_prompts..(slot + 1) * self.cfg.batch_prompts].to_vec()
    }

    /// Runs one step and returns its telemetry.
    pub fn step(&mut self) -> Result<TelemetryRecord<F>> {
        let step = self.step + 1;
        self.run_step(step).map_err(|e| e.at_step(step))
    }

    fn run_step(&mut self, step: usize) -> Result<TelemetryRecord<F>> {
        let cfg = &self.cfg;
        let batch = self.batch_for_step(step);
        let groups = collect_groups(
            &self.policies,
            self.suite,
            &batch,
            cfg.group_size,
            cfg.temperature,
            cfg.seed,
            step as u64,
        )?;

        let mut advantages = Vec::with_capacity(groups.len());
        let (mut pos_sum, mut neg_sum) = (F::zero(), F::zero());
        let (mut n_pos, mut n_neg) = (0usize, 0usize);
        for (group, &i) in groups.iter().zip(&batch) {
            let baseline = match cfg.estimator.variant {
                EstimatorVariant::PpoBaseline => Some(self.critic[i]),
                _ => None,
            };
            let adv = estimate(&group.group_rewards, &cfg.estimator, baseline)?.into_vec();
            for (&a, r) in adv.iter().zip(group.group_rewards.rewards()) {
                if r.is_positive() {
                    pos_sum = pos_sum + a.abs();
                    n_pos += 1;
                } else {
                    neg_sum = neg_sum + a.abs();
                    n_neg += 1;
                }
            }
            advantages.push(adv);
        }

        let mut kl_total = F::zero();
        let mut clipped = F::zero();
        let mut tokens = 0usize;
        for _ in 0..cfg.epochs_per_batch {
            for chunk in (0..batch.len())
                .collect::<Vec<_>>()
                .chunks(cfg.mini_batch_prompts)
            {
                for &b in chunk {
                    let i = batch[b];
                    let report = sequence_objective(
                        &groups[b].trajectories,
                        &advantages[b],
                        &self.policies[i],
                        &self.reference[i],
                        cfg.temperature,
                        &cfg.clip,
                    )?;
                    let t = F::from_count(report.tokens);
                    kl_total = kl_total + report.mean_kl * t;
                    clipped = clipped + report.clip_fraction * t;
                    tokens += report.tokens;
                    self.policies[i] =
                        self.policies[i].apply_update(&report.gradient, cfg.learning_rate)?;
                }
            }
        }

        if cfg.estimator.variant == EstimatorVariant::PpoBaseline {
            for (group, &i) in groups.iter().zip(&batch) {
                let mean = group
                    .group_rewards
                    .rewards()
                    .iter()
                    .map(|r| r.to_scalar::<F>())
                    .sum::<F>()
                    / F::from_count(group.group_rewards.len());
                self.critic[i] = self.critic[i] + cfg.critic_lr * (mean - self.critic[i]);
            }
        }

        if cfg.log_rollouts {
            for group in &groups {
                for (member, t) in group.trajectories.iter().enumerate() {
                    self.rollouts.push(RolloutLogRecord {
                        step,
                        prompt_id: group.prompt_id.clone(),
                        member,
                        tokens: t.tokens.clone(),
                        logprob_old: t.logprob_old.as_f64(),
                        reward: t.reward.expect("verified at collection"),
                    });
                }
            }
        }

        if step.is_multiple_of(cfg.eval_every) || step == cfg.total_steps {
            self.last_eval = EvalSnapshot {
                heldout_greedy_acc: greedy_accuracy(
                    &self.policies,
                    self.suite,
                    self.heldout,
                    &cfg.init,
                    cfg.seed,
                )?,
                mean_entropy: mean_entropy(&self.policies),
            };
            let text: String = self.policies.iter().map(|p| p.to_checkpoint()).collect();
            self.checkpoints.push((step, text));
        }
        self.step = step;

        let mean_or_zero = |s: F, n: usize| {
            if n == 0 {
                F::zero()
            } else {
                s / F::from_count(n)
            }
        };
        let correct = n_pos;
        Ok(TelemetryRecord {
            step,
            train_correct_ratio: F::from_count(correct) / F::from_count(n_pos + n_neg),
            heldout_greedy_acc: self.last_eval.heldout_greedy_acc,
            mean_entropy: self.last_eval.mean_entropy,
            mean_abs_adv_pos: mean_or_zero(pos_sum, n_pos),
            mean_abs_adv_neg: mean_or_zero(neg_sum, n_neg),
            mean_kl: mean_or_zero(kl_total, tokens).max(F::zero()),
            clip_fraction: mean_or_zero(clipped, tokens),
        })
    }

    /// Runs the remaining steps up to `total_steps`.
    pub fn run(mut self) -> Result<TrainOutcome<F>> {
        let mut telemetry = Vec::with_capacity(self.cfg.total_steps);
        while self.step < self.cfg.total_steps {
            telemetry.push(self.step()?);
        }
        Ok(TrainOutcome {
            initial: self.initial,
            telemetry,
            policies: self.policies,
            checkpoints: self.checkpoints,
            rollouts: self.rollouts,
        })
    }
}

pub fn train_run<F: Scalar>(
    cfg: TrainConfig<F>,
    suite: &TaskSuite,
    heldout: Option<&TaskSuite>,
) -> Result<TrainOutcome<F>> {
    Trainer::new(cfg, suite, heldout)?.run()
}

/// Sampled Pass@k averaged over the suite: `n` samples per prompt at
/// `temperature`, then the unbiased estimator per prompt.
pub fn eval_passk_sampled<F: Scalar>(
    policies: &[TabularPolicy<F>],
    suite: &TaskSuite,
    n: u64,
    ks: &[u64],
    temperature: F,
    seed: u64,
) -> Result<Vec<(u64, F)>> {
    if policies.len() != suite.len() {
        return Err(LabError::Shape(format!(
            "{} policies for {} tasks",
            policies.len(),
            suite.len()
        )));
    }
    for &k in ks {
        PasskQuery::new(n, 0, k)?;
    }
    let counts = policies
        .par_iter()
        .zip(suite.tasks().par_iter())
        .map(|(policy, task)| {
            task.check_policy(policy)?;
            let mut rng = stream(seed, &[TAG_EVAL, fnv1a(task.prompt_id().as_bytes())]);
            let mut c = 0u64;
            for _ in 0..n {
                let t = policy.sample_trajectory(temperature, &mut rng);
                c += task.verify(&t.tokens)? as u64;
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let prompts = F::from_count(suite.len());
    ks.iter()
        .map(|&k| {
            let mut total = F::zero();
            for &c in &counts {
                total = total + passk_unbiased::<F>(PasskQuery::new(n, c, k)?)?;
            }
            Ok((k, total / prompts))
        })
        .collect()
}
