//! A desk-scale laboratory for reinforcement learning with verifiable rewards.
//!
//! The crate implements the family of group-based advantage estimators
//! (asymmetric AGPO, GRPO, REINFORCE, weighted REINFORCE and a PPO-style
//! critic baseline), a tabular autoregressive softmax policy, synthetic tasks
//! with exact verifiers, an exact positive/negative sample reinforcement
//! simulator, the unbiased Pass@k estimator and the search-ads metrics.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`). The type
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! command line tool and the tolerances in the test-suite assume.

// negated comparisons below deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advantage;
pub mod cli;
pub mod envs;
mod error;
pub mod evalkit;
pub mod exactsim;
pub mod numfmt;
pub mod objective;
pub mod policy;
mod scalar;
pub mod seeding;
pub mod trainer;

pub use error::{LabError, Result};
pub use scalar::Scalar;

/// `f64` estimator configuration.
pub type EstimatorConfig = advantage::EstimatorConfig<f64>;
/// `f64` group statistics.
pub type GroupStats = advantage::GroupStats<f64>;
/// `f64` advantage vector.
pub type AdvantageVector = advantage::AdvantageVector<f64>;
/// `f64` clip configuration.
pub type ClipConfig = objective::ClipConfig<f64>;
/// `f64` surrogate report.
pub type SurrogateReport = objective::SurrogateReport<f64>;
/// `f64` tabular policy.
pub type TabularPolicy = policy::TabularPolicy<f64>;
/// `f64` parameter container (gradients and updates).
pub type Params = policy::Params<f64>;
/// `f64` trajectory.
pub type Trajectory = policy::Trajectory<f64>;
/// `f64` training configuration.
pub type TrainConfig = trainer::TrainConfig<f64>;
/// `f64` telemetry record.
pub type TelemetryRecord = trainer::TelemetryRecord<f64>;
/// `f64` exact-flow configuration.
pub type FlowConfig = exactsim::FlowConfig<f64>;
/// `f64` flow mode.
pub type FlowMode = exactsim::FlowMode<f64>;

/// Single-precision tabular policy.
pub type TabularPolicyF32 = policy::TabularPolicy<f32>;
/// Single-precision estimator configuration.
pub type EstimatorConfigF32 = advantage::EstimatorConfig<f32>;
