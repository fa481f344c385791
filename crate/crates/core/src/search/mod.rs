//! Decoding strategies over a fixed policy.

mod beam;
mod bnb;
mod rollouts;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algo::AlgoError;
use crate::env::{DecisionKey, EnvError, ModelState, RouteState};
use crate::model::{AttentionModel, EncoderCache, ModelError, StaticFeatures};
use crate::nn::Real;
use crate::problems::{ProblemError, ProblemInstance, ProblemKind, Tour};

pub use beam::{beam_search, beam_search_detailed, exhaustive_width, BeamCandidate, BeamOutcome};
pub use bnb::{dfs_branch_and_bound, dfs_branch_and_bound_with, BnbOutcome, BranchOrder, BNB_CVRP_CAP, BNB_TSP_CAP};
pub use rollouts::{active_search, all_starts, greedy_rollout, multi_greedy, sample_rollouts, ActiveSearchConfig};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{kind} with n = {n} exceeds the branch-and-bound cap of {cap}")]
    TooLarge { kind: ProblemKind, n: usize, cap: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    Sample,
    MultiGreedy,
    Beam,
    Active,
    Bnb,
}

impl Strategy {
    pub const ALL: [Strategy; 6] =
        [Strategy::Greedy, Strategy::Sample, Strategy::MultiGreedy, Strategy::Beam, Strategy::Active, Strategy::Bnb];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Sample => "sample",
            Strategy::MultiGreedy => "multi-greedy",
            Strategy::Beam => "beam",
            Strategy::Active => "active",
            Strategy::Bnb => "bnb",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = SearchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s || st.as_str().replace('-', "_") == s)
            .ok_or_else(|| SearchError::InvalidArgument(format!("unknown strategy `{s}`")))
    }
}

/// Best solution found by one strategy on one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_tour: Tour,
    pub best_length: f64,
    pub strategy: Strategy,
    /// Rollouts sampled, beam rows expanded or search nodes expanded.
    pub samples_or_expansions: u64,
    /// Seconds.
    pub wall_time: f64,
}

/// Knobs shared by the strategies; unused ones are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub width: usize,
    pub samples: usize,
    /// Number of forced starts for multi-greedy; `None` uses every node.
    pub starts: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { width: 5, samples: 128, starts: None, epochs: 10, seed: 0, learning_rate: 1e-4 }
    }
}

/// Runs one strategy on one instance.
pub fn run_strategy<F: Real>(
    strategy: Strategy,
    instance: &Arc<ProblemInstance>,
    model: &AttentionModel<F>,
    opts: &SearchOptions,
) -> Result<SearchResult, SearchError> {
    match strategy {
        Strategy::Greedy => greedy_rollout(instance, model),
        Strategy::Sample => sample_rollouts(instance, model, opts.samples, opts.seed),
        Strategy::MultiGreedy => {
            let mut starts = all_starts(instance);
            if let Some(k) = opts.starts {
                starts.truncate(k.max(1));
            }
            multi_greedy(instance, model, &starts)
        }
        Strategy::Beam => beam_search(instance, model, opts.width),
        Strategy::Active => {
            let cfg = ActiveSearchConfig {
                batch: opts.samples,
                epochs: opts.epochs,
                learning_rate: opts.learning_rate,
                seed: opts.seed,
                ..Default::default()
            };
            active_search(instance, model, &cfg)
        }
        Strategy::Bnb => dfs_branch_and_bound(instance, model),
    }
}

/// Model view of a set of partial solutions on one instance.
pub(crate) fn route_states_to_model(instance: &ProblemInstance, states: &[&RouteState]) -> ModelState {
    let nn = instance.num_nodes();
    let mut forbidden = vec![false; states.len() * nn];
    let mut scratch = vec![false; nn];
    for (b, s) in states.iter().enumerate() {
        s.fill_mask(instance, &mut scratch);
        for (f, &ok) in forbidden[b * nn..(b + 1) * nn].iter_mut().zip(&scratch) {
            *f = !ok;
        }
    }
    let cvrp = instance.kind() == ProblemKind::Cvrp;
    ModelState::from_parts(
        instance.kind(),
        nn,
        forbidden,
        states.iter().map(|s| if cvrp { 0 } else { s.first_node().unwrap_or(0) }).collect(),
        states.iter().map(|s| s.last_node().unwrap_or(0)).collect(),
        states.iter().map(|s| s.is_initial()).collect(),
        states.iter().map(|s| if cvrp { s.remaining_load() } else { 0.0 }).collect(),
        cvrp.then(|| states.iter().flat_map(|s| s.remaining_demand(instance)).collect()),
    )
}

const DECODE_CHUNK: usize = 16_384;

/// Log-probabilities for partial solutions of one instance, memoised by decision key.
pub(crate) struct DecodeMemo<'a, F: Real> {
    model: &'a AttentionModel<F>,
    cache: EncoderCache<F>,
    instance: &'a ProblemInstance,
    table: HashMap<DecisionKey, usize>,
    rows: Vec<f64>,
}

impl<'a, F: Real> DecodeMemo<'a, F> {
    pub(crate) fn new(model: &'a AttentionModel<F>, instance: &'a ProblemInstance) -> Result<Self, SearchError> {
        let cache = model.encode(&StaticFeatures::from_instances([instance]))?;
        Ok(DecodeMemo { model, cache, instance, table: HashMap::new(), rows: Vec::new() })
    }

    /// Decodes every state whose key has not been seen yet.
    pub(crate) fn ensure(&mut self, states: &[&RouteState]) -> Result<(), SearchError> {
        let mut missing = Vec::new();
        for s in states {
            let key = s.decision_key();
            if !self.table.contains_key(&key) {
                self.table.insert(key, usize::MAX);
                missing.push(*s);
            }
        }
        let nn = self.instance.num_nodes();
        for chunk in missing.chunks(DECODE_CHUNK) {
            let state = route_states_to_model(self.instance, chunk);
            let out = self.model.parallel_decode(&self.cache, &state, chunk.len())?;
            for (k, s) in chunk.iter().enumerate() {
                self.table.insert(s.decision_key(), self.rows.len());
                self.rows.extend(out.log_probs[k * nn..(k + 1) * nn].iter().map(|x| x.f64()));
            }
        }
        Ok(())
    }

    /// Row of a state previously passed to [`DecodeMemo::ensure`].
    pub(crate) fn get(&self, state: &RouteState) -> &[f64] {
        let at = self.table[&state.decision_key()];
        &self.rows[at..at + self.instance.num_nodes()]
    }

    pub(crate) fn distinct(&self) -> usize {
        self.table.len()
    }
}

#[cfg(test)]
mod tests;
