//! Synthetic verifiable tasks over enumerable token-sequence spaces.
//!
//! Each task fixes a vocabulary `V`, a response length `T` and an explicit
//! correct set. The verifier is membership in that set, so the full space of
//! `V^T` responses can be enumerated and every quantity computed exactly.
//!
//! Families:
//! * `modsum`: correct iff the token sum is congruent to `target` mod `modulus`.
//! * `subset`: a seeded random subset holding `round(density * V^T)` sequences.
//! * `longtail`: the Hamming ball of radius 1 around a seeded center sequence
//!   (the easy cluster) plus `rare_count` sequences drawn uniformly from
//!   outside the ball.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::{decode_sequence, encode_sequence, space_size, TabularPolicy};
use crate::seeding;
use crate::{LabError, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Modsum,
    Subset,
    Longtail,
}

impl TaskFamily {
    fn tag(self) -> u64 {
        match self {
            TaskFamily::Modsum => 1,
            TaskFamily::Subset => 2,
            TaskFamily::Longtail => 3,
        }
    }

    fn name(self) -> &'static str {
        match self {
            TaskFamily::Modsum => "modsum",
            TaskFamily::Subset => "subset",
            TaskFamily::Longtail => "longtail",
        }
    }
}

/// Family parameters for [`build_task_family`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    /// `target = None` draws a seeded target per task.
    Modsum {
        modulus: usize,
        #[serde(default)]
        target: Option<usize>,
    },
    Subset {
        density: f64,
    },
    Longtail {
        rare_count: usize,
    },
}

impl FamilySpec {
    pub fn family(&self) -> TaskFamily {
        match self {
            FamilySpec::Modsum { .. } => TaskFamily::Modsum,
            FamilySpec::Subset { .. } => TaskFamily::Subset,
            FamilySpec::Longtail { .. } => TaskFamily::Longtail,
        }
    }
}

/// Per-task parameters as recorded in the suite file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modulus: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rare_count: Option<usize>,
    /// Center of the easy cluster (`longtail`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<usize>>,
    /// Intended `|correct| / V^T`.
    #[serde(default)]
    pub difficulty_target: f64,
}

/// A prompt with its enumerable response space and verifier.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    prompt_id: String,
    family: TaskFamily,
    vocab: usize,
    len: usize,
    params: TaskParams,
    correct: Vec<bool>,
    n_correct: usize,
}

/// One line of a suite file.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskRecord {
    prompt_id: String,
    family: TaskFamily,
    #[serde(rename = "V")]
    vocab: usize,
    #[serde(rename = "T")]
    len: usize,
    params: TaskParams,
    correct_set: Vec<Vec<usize>>,
}

impl TaskSpec {
    /// Builds a task from an explicit list of correct sequences.
    pub fn new(
        prompt_id: impl Into<String>,
        family: TaskFamily,
        vocab: usize,
        len: usize,
        params: TaskParams,
        correct_set: &[Vec<usize>],
    ) -> Result<Self> {
        let n = space_size(vocab, len)?;
        let mut correct = vec![false; n];
        for seq in correct_set {
            if seq.len() != len || seq.iter().any(|&t| t >= vocab) {
                return Err(LabError::Shape(format!(
                    "correct sequence {seq:?} does not fit V = {vocab}, T = {len}"
                )));
            }
            correct[encode_sequence(seq, vocab)] = true;
        }
        Ok(Self::from_mask(
            prompt_id.into(),
            family,
            vocab,
            len,
            params,
            correct,
        ))
    }

    fn from_mask(
        prompt_id: String,
        family: TaskFamily,
        vocab: usize,
        len: usize,
        params: TaskParams,
        correct: Vec<bool>,
    ) -> Self {
        let n_correct = correct.iter().filter(|&&c| c).count();
        Self {
            prompt_id,
            family,
            vocab,
            len,
            params,
            correct,
            n_correct,
        }
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn family(&self) -> TaskFamily {
        self.family
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn params(&self) -> &TaskParams {
        &self.params
    }

    pub fn space_size(&self) -> usize {
        self.correct.len()
    }

    pub fn correct_count(&self) -> usize {
        self.n_correct
    }

    pub fn density(&self) -> f64 {
        self.n_correct as f64 / self.correct.len() as f64
    }

    /// Correctness of every sequence, indexed lexicographically.
    pub fn correct_mask(&self) -> &[bool] {
        &self.correct
    }

    pub fn is_correct_index(&self, index: usize) -> bool {
        self.correct[index]
    }

    pub fn correct_set(&self) -> Vec<Vec<usize>> {
        self.correct
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(|(i, _)| decode_sequence(i, self.vocab, self.len))
            .collect()
    }

    /// Deterministic verifier: 1 iff `tokens` is in the correct set.
    pub fn verify(&self, tokens: &[usize]) -> Result<u8> {
        if tokens.len() != self.len {
            return Err(LabError::InvalidResponse(format!(
                "length {} != T = {}",
                tokens.len(),
                self.len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(LabError::InvalidResponse(format!(
                "token {t} >= V = {}",
                self.vocab
            )));
        }
        Ok(u8::from(self.correct[encode_sequence(tokens, self.vocab)]))
    }

    /// Lexicographic indices of the rare correct paths of a `longtail` task:
    /// correct sequences at Hamming distance >= 2 from the center.
    pub fn rare_indices(&self) -> Vec<usize> {
        self.split_longtail().1
    }

    /// Lexicographic indices of the easy cluster of a `longtail` task.
    pub fn cluster_indices(&self) -> Vec<usize> {
        self.split_longtail().0
    }

    fn split_longtail(&self) -> (Vec<usize>, Vec<usize>) {
        let Some(center) = self.params.center.as_ref() else {
            return (Vec::new(), Vec::new());
        };
        let mut cluster = Vec::new();
        let mut rare = Vec::new();
        for i in (0..self.correct.len()).filter(|&i| self.correct[i]) {
            if hamming(&decode_sequence(i, self.vocab, self.len), center) <= 1 {
                cluster.push(i);
            } else {
                rare.push(i);
            }
        }
        (cluster, rare)
    }

    pub fn check_policy<F: Scalar>(&self, policy: &TabularPolicy<F>) -> Result<()> {
        if policy.vocab() != self.vocab || policy.seq_len() != self.len {
            return Err(LabError::Shape(format!(
                "policy (V={}, T={}) does not match task {} (V={}, T={})",
                policy.vocab(),
                policy.seq_len(),
                self.prompt_id,
                self.vocab,
                self.len
            )));
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> Result<String> {
        let record = TaskRecord {
            prompt_id: self.prompt_id.clone(),
            family: self.family,
            vocab: self.vocab,
            len: self.len,
            params: self.params.clone(),
            correct_set: self.correct_set(),
        };
        Ok(serde_json::to_string(&record)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let r: TaskRecord = serde_json::from_str(line)?;
        Self::new(
            r.prompt_id,
            r.family,
            r.vocab,
            r.len,
            r.params,
            &r.correct_set,
        )
    }
}

fn hamming(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Counts of tasks per prior-correctness regime under the uniform policy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeMix {
    /// Empty correct set.
    pub beyond: usize,
    /// Partially correct space.
    pub learnable: usize,
    /// Every sequence correct.
    pub mastered: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSuite {
    tasks: Vec<TaskSpec>,
    seed: Option<u64>,
    regime_mix: RegimeMix,
}

impl TaskSuite {
    pub fn new(tasks: Vec<TaskSpec>, seed: Option<u64>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &tasks {
            if !seen.insert(t.prompt_id.clone()) {
                return Err(LabError::InvalidConfig(format!(
                    "duplicate prompt_id '{}'",
                    t.prompt_id
                )));
            }
        }
        let mut mix = RegimeMix::default();
        for t in &tasks {
            match t.n_correct {
                0 => mix.beyond += 1,
                n if n == t.space_size() => mix.mastered += 1,
                _ => mix.learnable += 1,
            }
        }
        Ok(Self {
            tasks,
            seed,
            regime_mix: mix,
        })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn regime_mix(&self) -> RegimeMix {
        self.regime_mix
    }

    pub fn get(&self, prompt_id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.prompt_id == prompt_id)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for t in &self.tasks {
            out.push_str(&t.to_json_line()?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let tasks = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(TaskSpec::from_json_line)
            .collect::<Result<Vec<_>>>()?;
        Self::new(tasks, None)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

/// Builds `count` tasks of one family. Deterministic in `seed`.
pub fn build_task_family(
    spec: &FamilySpec,
    vocab: usize,
    len: usize,
    count: usize,
    seed: u64,
) -> Result<TaskSuite> {
    let n = space_size(vocab, len)?;
    let family = spec.family();
    let mut tasks = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = seeding::stream(seed, &[family.tag(), i as u64]);
        let prompt_id = format!("{}-{:04}", family.name(), i);
        let (params, mask) = match *spec {
            FamilySpec::Modsum { modulus, target } => {
                if modulus == 0 {
                    return Err(LabError::InvalidConfig("modulus must be positive".into()));
                }
                let target = match target {
                    Some(t) if t < modulus => t,
                    Some(t) => {
                        return Err(LabError::InvalidConfig(format!(
                            "target {t} >= modulus {modulus}"
                        )))
                    }
                    None => rng.random_range(0..modulus),
                };
                let mask: Vec<bool> = (0..n)
                    .map(|idx| {
                        decode_sequence(idx, vocab, len).iter().sum::<usize>() % modulus == target
                    })
                    .collect();
                let params = TaskParams {
                    modulus: Some(modulus),
                    target: Some(target),
                    difficulty_target: 1.0 / modulus as f64,
                    ..TaskParams::default()
                };
                (params, mask)
            }
            FamilySpec::Subset { density } => {
                if !(0.0..=1.0).contains(&density) {
                    return Err(LabError::InvalidConfig(format!(
                        "density {density} outside [0, 1]"
                    )));
                }
                let k = (density * n as f64).round() as usize;
                let mut mask = vec![false; n];
                for idx in index::sample(&mut rng, n, k) {
                    mask[idx] = true;
                }
                let params = TaskParams {
                    density: Some(density),
                    difficulty_target: density,
                    ..TaskParams::default()
                };
                (params, mask)
            }
            FamilySpec::Longtail { rare_count } => {
                let center: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
                let mut mask = vec![false; n];
                let mut outside = Vec::new();
                for (idx, slot) in mask.iter_mut().enumerate() {
                    if hamming(&decode_sequence(idx, vocab, len), &center) <= 1 {
                        *slot = true;
                    } else {
                        outside.push(idx);
                    }
                }
                if rare_count > outside.len() {
                    return Err(LabError::InvalidConfig(format!(
                        "rare_count {rare_count} exceeds {} sequences outside the cluster",
                        outside.len()
                    )));
                }
                for j in index::sample(&mut rng, outside.len(), rare_count) {
                    mask[outside[j]] = true;
                }
                let cluster = 1 + len * (vocab - 1);
                let params = TaskParams {
                    rare_count: Some(rare_count),
                    center: Some(center),
                    difficulty_target: (cluster + rare_count) as f64 / n as f64,
                    ..TaskParams::default()
                };
                (params, mask)
            }
        };
        tasks.push(TaskSpec::from_mask(
            prompt_id, family, vocab, len, params, mask,
        ));
    }
    TaskSuite::new(tasks, Some(seed))
}

/// `P(y in correct set)` under the policy, by enumeration.
pub fn prior_correctness_exact<F: Scalar>(policy: &TabularPolicy<F>, task: &TaskSpec) -> Result<F> {
    prior_correctness_at(policy, task, F::one())
}

pub fn prior_correctness_at<F: Scalar>(
    policy: &TabularPolicy<F>,
    task: &TaskSpec,
    temperature: F,
) -> Result<F> {
    task.check_policy(policy)?;
    let probs = policy.sequence_probabilities(temperature);
    Ok(probs
        .iter()
        .zip(task.correct_mask())
        .filter(|(_, &c)| c)
        .map(|(&p, _)| p)
        .sum::<F>()
        .min(F::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyInit;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn modsum_count_brute(vocab: usize, len: usize, m: usize, target: usize) -> usize {
        let mut count = 0;
        let mut digits = vec![0; len];
        loop {
            if digits.iter().sum::<usize>() % m == target {
                count += 1;
            }
            let mut i = 0;
            while i < len {
                digits[i] += 1;
                if digits[i] < vocab {
                    break;
                }
                digits[i] = 0;
                i += 1;
            }
            if i == len {
                return count;
            }
        }
    }

    #[test]
    fn modsum_density() {
        assert_eq!(modsum_count_brute(4, 3, 4, 0), 16);
        let s = build_task_family(
            &FamilySpec::Modsum {
                modulus: 4,
                target: Some(0),
            },
            4,
            3,
            1,
            1,
        )
        .unwrap();
        let t = &s.tasks()[0];
        assert_eq!(t.correct_count(), 16);
        assert_eq!(t.space_size(), 64);
        assert_eq!(t.verify(&[1, 1, 2]).unwrap(), 1);
        assert_eq!(t.verify(&[1, 1, 1]).unwrap(), 0);
        assert!(matches!(
            t.verify(&[1, 1]),
            Err(LabError::InvalidResponse(_))
        ));
    }

    #[test]
    fn subset_extremes() {
        let empty = build_task_family(&FamilySpec::Subset { density: 0.0 }, 3, 3, 2, 5).unwrap();
        assert!(empty.tasks().iter().all(|t| t.correct_count() == 0));
        assert_eq!(empty.regime_mix().beyond, 2);
        let full = build_task_family(&FamilySpec::Subset { density: 1.0 }, 3, 3, 1, 5).unwrap();
        assert_eq!(full.tasks()[0].correct_count(), 27);
        assert_eq!(full.regime_mix().mastered, 1);
        let bad = build_task_family(&FamilySpec::Subset { density: 1.5 }, 3, 3, 1, 5);
        assert!(bad.is_err());
    }

    #[test]
    fn size_budget() {
        let r = build_task_family(&FamilySpec::Subset { density: 0.5 }, 4, 9, 1, 0);
        assert!(matches!(r, Err(LabError::Size { .. })));
    }

    #[test]
    fn longtail_structure() {
        let s = build_task_family(&FamilySpec::Longtail { rare_count: 7 }, 4, 6, 3, 11).unwrap();
        for t in s.tasks() {
            assert_eq!(t.cluster_indices().len(), 1 + 6 * 3);
            assert_eq!(t.rare_indices().len(), 7);
            assert_eq!(t.correct_count(), 26);
        }
    }

    #[test]
    fn exact_prior_correctness() {
        let s = build_task_family(
            &FamilySpec::Modsum {
                modulus: 4,
                target: Some(0),
            },
            4,
            3,
            1,
            1,
        )
        .unwrap();
        let t = &s.tasks()[0];
        let u = TabularPolicy::<f64>::uniform(4, 3, "x").unwrap();
        assert!((prior_correctness_exact(&u, t).unwrap() - 0.25).abs() < 1e-9);

        let empty = build_task_family(&FamilySpec::Subset { density: 0.0 }, 4, 3, 1, 1).unwrap();
        assert_eq!(prior_correctness_exact(&u, &empty.tasks()[0]).unwrap(), 0.0);

        let hot = TabularPolicy::<f64>::one_hot(4, 3, "x", &[1, 1, 2], 1e6).unwrap();
        assert!((prior_correctness_exact(&hot, t).unwrap() - 1.0).abs() < 1e-9);

        let wrong = TabularPolicy::<f64>::uniform(3, 3, "x").unwrap();
        assert!(matches!(
            prior_correctness_exact(&wrong, t),
            Err(LabError::Shape(_))
        ));
    }

    #[test]
    fn prior_matches_monte_carlo() {
        let s = build_task_family(&FamilySpec::Subset { density: 0.3 }, 3, 4, 1, 21).unwrap();
        let t = &s.tasks()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: TabularPolicy<f64> = PolicyInit::Gaussian { scale: 1.0 }
            .build(3, 4, "x", None, &mut rng)
            .unwrap();
        let exact = prior_correctness_exact(&p, t).unwrap();
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| {
                t.verify(&p.sample_trajectory(1.0, &mut rng).tokens)
                    .unwrap()
                    == 1
            })
            .count();
        let est = hits as f64 / n as f64;
        let se = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((est - exact).abs() < 4.0 * se, "{est} vs {exact}");
    }

    #[test]
    fn jsonl_round_trip_and_determinism() {
        let spec = FamilySpec::Longtail { rare_count: 3 };
        let a = build_task_family(&spec, 3, 4, 4, 99).unwrap();
        let b = build_task_family(&spec, 3, 4, 4, 99).unwrap();
        let text = a.to_jsonl().unwrap();
        assert_eq!(text, b.to_jsonl().unwrap());
        let back = TaskSuite::from_jsonl(&text).unwrap();
        assert_eq!(back.tasks(), a.tasks());
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["prompt_id", "family", "V", "T", "params", "correct_set"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        let c = build_task_family(&spec, 3, 4, 4, 100).unwrap();
        assert_ne!(c.to_jsonl().unwrap(), text);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let t = TaskSpec::new("a", TaskFamily::Subset, 2, 2, TaskParams::default(), &[]).unwrap();
        assert!(TaskSuite::new(vec![t.clone(), t], None).is_err());
    }

    proptest! {
        #[test]
        fn verifier_enumeration_consistency(seed in any::<u64>(), density in 0.0f64..=1.0, m in 1usize..6) {
            for spec in [FamilySpec::Subset { density }, FamilySpec::Modsum { modulus: m, target: None }] {
                let s = build_task_family(&spec, 3, 3, 2, seed).unwrap();
                for t in s.tasks() {
                    let total: usize = (0..27).map(|i| t.verify(&decode_sequence(i, 3, 3)).unwrap() as usize).sum();
                    prop_assert_eq!(total, t.correct_count());
                    prop_assert_eq!(total, t.correct_set().len());
                }
            }
        }
    }
}
