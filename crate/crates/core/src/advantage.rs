//! Group advantage estimators over signed outcome rewards.
//!
//! Every estimator consumes a group of `G` rewards in `{-1, +1}` and returns
//! one scalar advantage per member. Because rewards are outcome-level, all
//! members sharing a reward sign receive the same advantage.
//!
//! The asymmetric estimator (AGPO) is
//!
//! ```text
//! A_i = (r_i - mu) / sqrt(sigma^2 + delta^2) + [r_i < 0] * R
//! ```
//!
//! with `mu`, `sigma` the population mean and standard deviation of the group,
//! `delta` the constraint factor and `R <= 0` the gated negative reward.

use serde::{Deserialize, Serialize};

use crate::numfmt::sig7_opt;
use crate::{LabError, Result, Scalar};

/// A verified outcome mapped onto `{-1, +1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RewardSign {
    Negative,
    Positive,
}

impl RewardSign {
    /// Maps the verifier output `{0, 1}` onto `{-1, +1}`.
    pub fn from_verdict(verdict: u8) -> Self {
        if verdict == 0 {
            RewardSign::Negative
        } else {
            RewardSign::Positive
        }
    }

    pub fn from_value(value: i64) -> Result<Self> {
        match value {
            1 => Ok(RewardSign::Positive),
            -1 => Ok(RewardSign::Negative),
            other => Err(LabError::Parse(format!(
                "reward must be -1 or +1, got {other}"
            ))),
        }
    }

    pub fn value(self) -> i8 {
        match self {
            RewardSign::Negative => -1,
            RewardSign::Positive => 1,
        }
    }

    pub fn is_positive(self) -> bool {
        self == RewardSign::Positive
    }

    pub fn to_scalar<F: Scalar>(self) -> F {
        if self.is_positive() {
            F::one()
        } else {
            -F::one()
        }
    }
}

impl Serialize for RewardSign {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.value())
    }
}

impl<'de> Deserialize<'de> for RewardSign {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        RewardSign::from_value(v).map_err(serde::de::Error::custom)
    }
}

/// The signed rewards of one group of responses to a prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRewards {
    prompt_id: String,
    rewards: Vec<RewardSign>,
}

impl GroupRewards {
    pub fn new(prompt_id: impl Into<String>, rewards: Vec<RewardSign>) -> Result<Self> {
        if rewards.len() < 2 {
            return Err(LabError::InvalidGroup(format!(
                "group size {} < 2",
                rewards.len()
            )));
        }
        Ok(Self {
            prompt_id: prompt_id.into(),
            rewards,
        })
    }

    /// Canonical group of size `g` with `k` leading positive rewards.
    pub fn canonical(g: usize, k: usize) -> Result<Self> {
        if k > g {
            return Err(LabError::InvalidGroup(format!("k = {k} > G = {g}")));
        }
        let rewards = (0..g)
            .map(|i| {
                if i < k {
                    RewardSign::Positive
                } else {
                    RewardSign::Negative
                }
            })
            .collect();
        Self::new("canonical", rewards)
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn rewards(&self) -> &[RewardSign] {
        &self.rewards
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn count_correct(&self) -> usize {
        self.rewards.iter().filter(|r| r.is_positive()).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupStats<F> {
    pub mean: F,
    /// Population standard deviation.
    pub std: F,
    pub count_correct: usize,
}

pub fn group_stats<F: Scalar>(group: &GroupRewards) -> Result<GroupStats<F>> {
    let g = group.len();
    if g < 2 {
        return Err(LabError::InvalidGroup(format!("group size {g} < 2")));
    }
    let k = group.count_correct();
    let n = F::from_count(g);
    // (2k - G) / G is a single correctly rounded division
    let mean = (F::from_count(2 * k) - n) / n;
    // squared deviations grouped by class, so the result ignores member order
    let up = F::one() - mean;
    let down = -F::one() - mean;
    let variance = (F::from_count(k) * up * up + F::from_count(g - k) * down * down) / n;
    Ok(GroupStats {
        mean,
        std: variance.sqrt(),
        count_correct: k,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorVariant {
    Agpo,
    Grpo,
    Reinforce,
    WReinforce,
    PpoBaseline,
}

impl std::str::FromStr for EstimatorVariant {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "agpo" => Ok(Self::Agpo),
            "grpo" => Ok(Self::Grpo),
            "reinforce" => Ok(Self::Reinforce),
            "w_reinforce" | "wreinforce" => Ok(Self::WReinforce),
            "ppo" | "ppo_baseline" => Ok(Self::PpoBaseline),
            other => Err(LabError::InvalidConfig(format!(
                "unknown estimator '{other}'"
            ))),
        }
    }
}

/// Which advantage rule to apply, with its constants.
///
/// Fields that a variant does not use are ignored but still range-checked.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    deny_unknown_fields,
    bound(deserialize = "F: Scalar + Deserialize<'de>")
)]
pub struct EstimatorConfig<F> {
    pub variant: EstimatorVariant,
    /// Constraint factor inside `sqrt(sigma^2 + delta^2)`.
    #[serde(default = "default_delta")]
    pub delta: F,
    /// Gated negative reward added to every incorrect sample.
    #[serde(default = "default_r_floor")]
    pub r_floor: F,
    /// Positive weight of the (weighted) REINFORCE estimators.
    #[serde(default = "default_lambda")]
    pub lambda_pos: F,
    #[serde(default = "default_eps_std")]
    pub eps_std: F,
}

fn default_delta<F: Scalar>() -> F {
    F::lit(2.0)
}
fn default_r_floor<F: Scalar>() -> F {
    -F::one()
}
fn default_lambda<F: Scalar>() -> F {
    F::one()
}
fn default_eps_std<F: Scalar>() -> F {
    F::lit(1e-6)
}

impl<F: Scalar> EstimatorConfig<F> {
    fn with_variant(variant: EstimatorVariant) -> Self {
        Self {
            variant,
            delta: default_delta(),
            r_floor: default_r_floor(),
            lambda_pos: default_lambda(),
            eps_std: default_eps_std(),
        }
    }

    pub fn agpo() -> Self {
        Self::with_variant(EstimatorVariant::Agpo)
    }

    pub fn grpo() -> Self {
        Self::with_variant(EstimatorVariant::Grpo)
    }

    pub fn reinforce() -> Self {
        Self::with_variant(EstimatorVariant::Reinforce)
    }

    /// Weighted REINFORCE with the NSR-dominant default `lambda = 0.1`.
    pub fn w_reinforce() -> Self {
        Self {
            lambda_pos: F::lit(0.1),
            ..Self::with_variant(EstimatorVariant::WReinforce)
        }
    }

    pub fn ppo_baseline() -> Self {
        Self::with_variant(EstimatorVariant::PpoBaseline)
    }

    pub fn with_delta(mut self, delta: F) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_r_floor(mut self, r_floor: F) -> Self {
        self.r_floor = r_floor;
        self
    }

    pub fn with_lambda(mut self, lambda_pos: F) -> Self {
        self.lambda_pos = lambda_pos;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidConfig(m));
        if !(self.delta >= F::zero()) {
            return bad(format!("delta must be >= 0, got {}", self.delta));
        }
        if !(self.r_floor <= F::zero()) {
            return bad(format!("r_floor must be <= 0, got {}", self.r_floor));
        }
        if !(self.lambda_pos > F::zero()) {
            return bad(format!("lambda_pos must be > 0, got {}", self.lambda_pos));
        }
        if !(self.eps_std > F::zero()) {
            return bad(format!("eps_std must be > 0, got {}", self.eps_std));
        }
        Ok(())
    }

    fn expect_variant(&self, allowed: &[EstimatorVariant]) -> Result<()> {
        self.validate()?;
        if allowed.contains(&self.variant) {
            Ok(())
        } else {
            Err(LabError::InvalidConfig(format!(
                "estimator {:?} used where {:?} expected",
                self.variant, allowed
            )))
        }
    }
}

/// One advantage per group member, aligned with the group order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageVector<F>(Vec<F>);

impl<F: Scalar> AdvantageVector<F> {
    pub fn values(&self) -> &[F] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<F> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn by_sign(group: &GroupRewards, pos: F, neg: F) -> Self {
        Self(
            group
                .rewards()
                .iter()
                .map(|r| if r.is_positive() { pos } else { neg })
                .collect(),
        )
    }
}

/// Advantages of the two sign classes of a group: `(positive, negative)`.
fn agpo_pair<F: Scalar>(stats: &GroupStats<F>, cfg: &EstimatorConfig<F>) -> Result<(F, F)> {
    let denom = (stats.std * stats.std + cfg.delta * cfg.delta).sqrt();
    if denom == F::zero() {
        return Err(LabError::DegenerateDenominator);
    }
    let pos = (F::one() - stats.mean) / denom;
    let neg = (-F::one() - stats.mean) / denom + cfg.r_floor;
    Ok((pos, neg))
}

fn grpo_pair<F: Scalar>(stats: &GroupStats<F>, cfg: &EstimatorConfig<F>) -> (F, F) {
    let denom = stats.std + cfg.eps_std;
    (
        (F::one() - stats.mean) / denom,
        (-F::one() - stats.mean) / denom,
    )
}

pub fn agpo_advantage<F: Scalar>(
    group: &GroupRewards,
    cfg: &EstimatorConfig<F>,
) -> Result<AdvantageVector<F>> {
    cfg.expect_variant(&[EstimatorVariant::Agpo])?;
    let stats = group_stats(group)?;
    let (pos, neg) = agpo_pair(&stats, cfg)?;
    Ok(AdvantageVector::by_sign(group, pos, neg))
}

pub fn grpo_advantage<F: Scalar>(
    group: &GroupRewards,
    cfg: &EstimatorConfig<F>,
) -> Result<AdvantageVector<F>> {
    cfg.expect_variant(&[EstimatorVariant::Grpo])?;
    let stats = group_stats(group)?;
    let (pos, neg) = grpo_pair(&stats, cfg);
    Ok(AdvantageVector::by_sign(group, pos, neg))
}

/// `+lambda` for correct samples, `-1` for incorrect ones; independent of the
/// rest of the group. `lambda = 1` is plain REINFORCE.
pub fn signed_reinforce_advantage<F: Scalar>(
    group: &GroupRewards,
    cfg: &EstimatorConfig<F>,
) -> Result<AdvantageVector<F>> {
    cfg.expect_variant(&[EstimatorVariant::Reinforce, EstimatorVariant::WReinforce])?;
    Ok(AdvantageVector::by_sign(group, cfg.lambda_pos, -F::one()))
}

/// Outcome reward minus a state-value baseline (episodic, undiscounted).
pub fn ppo_baseline_advantage<F: Scalar>(reward: RewardSign, baseline: F) -> Result<F> {
    if !(baseline >= -F::one() && baseline <= F::one()) {
        return Err(LabError::InvalidBaseline(baseline.as_f64()));
    }
    Ok(reward.to_scalar::<F>() - baseline)
}

/// Dispatches to the configured estimator. `baseline` is the critic value
/// used by the PPO variant; the group mean is used when it is `None`.
pub fn estimate<F: Scalar>(
    group: &GroupRewards,
    cfg: &EstimatorConfig<F>,
    baseline: Option<F>,
) -> Result<AdvantageVector<F>> {
    match cfg.variant {
        EstimatorVariant::Agpo => agpo_advantage(group, cfg),
        EstimatorVariant::Grpo => grpo_advantage(group, cfg),
        EstimatorVariant::Reinforce | EstimatorVariant::WReinforce => {
            signed_reinforce_advantage(group, cfg)
        }
        EstimatorVariant::PpoBaseline => {
            cfg.validate()?;
            let b = match baseline {
                Some(b) => b,
                None => group_stats::<F>(group)?.mean,
            };
            let values = group
                .rewards()
                .iter()
                .map(|&r| ppo_baseline_advantage(r, b))
                .collect::<Result<Vec<_>>>()?;
            Ok(AdvantageVector(values))
        }
    }
}

/// Advantage of each sign class in the canonical group with `k` correct out
/// of `g`. A class absent from the group is `None`.
pub fn class_advantages<F: Scalar>(
    g: usize,
    k: usize,
    cfg: &EstimatorConfig<F>,
) -> Result<(Option<F>, Option<F>)> {
    let group = GroupRewards::canonical(g, k)?;
    let adv = estimate(&group, cfg, None)?;
    let v = adv.values();
    let pos = (k > 0).then(|| v[0]);
    let neg = (k < g).then(|| v[g - 1]);
    Ok((pos, neg))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvantageRow<F> {
    pub k: usize,
    pub adv_pos: Option<F>,
    pub adv_neg: Option<F>,
}

/// Advantage of each sign class for every composition `k = 0..=g`.
pub fn advantage_table<F: Scalar>(
    g: usize,
    cfg: &EstimatorConfig<F>,
) -> Result<Vec<AdvantageRow<F>>> {
    if g < 2 {
        return Err(LabError::InvalidGroup(format!("group size {g} < 2")));
    }
    (0..=g)
        .map(|k| {
            let (adv_pos, adv_neg) = class_advantages(g, k, cfg)?;
            Ok(AdvantageRow {
                k,
                adv_pos,
                adv_neg,
            })
        })
        .collect()
}

/// CSV with header `k,adv_pos,adv_neg`; undefined cells are empty.
pub fn advantage_table_csv<F: Scalar>(rows: &[AdvantageRow<F>]) -> String {
    let mut out = String::from("k,adv_pos,adv_neg\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            row.k,
            sig7_opt(row.adv_pos.map(Scalar::as_f64)),
            sig7_opt(row.adv_neg.map(Scalar::as_f64)),
        ));
    }
    out
}
