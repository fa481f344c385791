//! Step/reset environments for TSP and CVRP.
//!
//! [`RoutingEnv`] is the scalar reference environment, [`VectorEnv`] the
//! batched structure-of-arrays implementation over `M` instances with `N`
//! trajectories each. Both emit the same [`Observation`] schema.

mod observation;
mod scalar;
mod state;
mod vector;

pub use observation::{observation_to_model_state, DenseRow, ModelState, Observation};
pub use scalar::{all_finished, RoutingEnv, ScalarLoop, StepResult};
pub(crate) use scalar::tour_from_actions;
pub use state::{DecisionKey, NodeSet, RouteState};
pub use vector::{VectorEnv, VectorEnvConfig, VectorStep, NOOP_ACTION};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problems::ProblemError;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("action {action} is not permitted in row {row}")]
    IllegalAction { row: usize, action: usize },
    #[error("the episode has already finished")]
    Terminal,
    #[error("row {row} has finished and only accepts the no-op action")]
    FinishedRow { row: usize },
    #[error("expected a batch of {expected} actions, got {got}")]
    BatchShape { expected: usize, got: usize },
    #[error("observation is missing the `{0}` key")]
    Schema(&'static str),
    #[error("invalid environment configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// How distance is turned into reward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Negative incremental distance on every step.
    #[default]
    PerStep,
    /// Zero until the final step, which carries the negative tour length.
    Terminal,
}

impl std::str::FromStr for RewardMode {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_step" | "per-step" | "step" => Ok(RewardMode::PerStep),
            "terminal" => Ok(RewardMode::Terminal),
            other => Err(EnvError::InvalidConfig(format!("unknown reward mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for RewardMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RewardMode::PerStep => "per_step",
            RewardMode::Terminal => "terminal",
        })
    }
}

#[inline]
pub(crate) fn reward_for(mode: RewardMode, travelled: f64, length_after: f64, done: bool) -> f64 {
    match mode {
        RewardMode::PerStep => -travelled,
        RewardMode::Terminal if done => -length_after,
        RewardMode::Terminal => 0.0,
    }
}
