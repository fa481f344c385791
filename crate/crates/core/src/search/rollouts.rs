use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SearchError, SearchResult, Strategy};
use crate::algo::{collect_rollouts, max_episode_steps, reinforce_loss, Actor};
use crate::env::{RewardMode, VectorEnv};
use crate::model::AttentionModel;
use crate::nn::{clip_grad_norm, Adam, Real, Tape};
use crate::problems::{tour_length, ProblemInstance, ProblemKind, Tour};
use crate::seeds::derive_seed;

const ROW_CHUNK: usize = 1024;

/// Every admissible forced start: all nodes (TSP) or every customer (CVRP).
pub fn all_starts(instance: &ProblemInstance) -> Vec<usize> {
    match instance.kind() {
        ProblemKind::Tsp => (0..instance.n()).collect(),
        ProblemKind::Cvrp => (1..=instance.n()).collect(),
    }
}

/// Runs `rows` complete trajectories on one instance.
fn run_rows<F: Real>(
    instance: &Arc<ProblemInstance>,
    model: &AttentionModel<F>,
    rows: usize,
    actor: Actor<'_>,
) -> Result<(VectorEnv, crate::algo::RolloutBuffer<crate::algo::RoutingContext>), SearchError> {
    let mut env = VectorEnv::from_instances(vec![instance.clone()], rows, RewardMode::PerStep)?;
    let horizon = max_episode_steps(instance.kind(), instance.n());
    let buf = collect_rollouts(&mut env, model, horizon, actor)?;
    Ok((env, buf))
}

/// Keeps the first strictly shortest tour.
#[derive(Default)]
struct Best {
    tour: Option<Tour>,
    length: f64,
}

impl Best {
    fn offer(&mut self, instance: &ProblemInstance, tours: Vec<Tour>) -> Result<(), SearchError> {
        for tour in tours {
            let len = tour_length(instance, &tour)?;
            if self.tour.is_none() || len < self.length {
                self.tour = Some(tour);
                self.length = len;
            }
        }
        Ok(())
    }

    fn finish(self, strategy: Strategy, count: u64, start: Instant) -> SearchResult {
        SearchResult {
            best_tour: self.tour.expect("at least one rollout"),
            best_length: self.length,
            strategy,
            samples_or_expansions: count,
            wall_time: start.elapsed().as_secs_f64(),
        }
    }
}

pub fn greedy_rollout<F: Real>(instance: &Arc<ProblemInstance>, model: &AttentionModel<F>) -> Result<SearchResult, SearchError> {
    let start = Instant::now();
    let (env, _) = run_rows(instance, model, 1, Actor::Greedy)?;
    let mut best = Best::default();
    best.offer(instance, env.tours())?;
    Ok(best.finish(Strategy::Greedy, 1, start))
}

/// Generator of sampled row `j`; row `j` draws the same actions for any total `n`.
fn row_rngs(seed: u64, rows: std::ops::Range<usize>) -> Vec<ChaCha8Rng> {
    rows.map(|j| ChaCha8Rng::seed_from_u64(derive_seed(seed, j as u64))).collect()
}

/// `n` independent sampled rollouts; returns the shortest.
pub fn sample_rollouts<F: Real>(
    instance: &Arc<ProblemInstance>,
    model: &AttentionModel<F>,
    n: usize,
    seed: u64,
) -> Result<SearchResult, SearchError> {
    if n == 0 {
        return Err(SearchError::InvalidArgument("sample count must be at least 1".into()));
    }
    let start = Instant::now();
    let mut best = Best::default();
    let mut done = 0;
    while done < n {
        let rows = (n - done).min(ROW_CHUNK);
        let mut rngs = row_rngs(seed, done..done + rows);
        let (env, _) = run_rows(instance, model, rows, Actor::SampleRows(&mut rngs))?;
        best.offer(instance, env.tours())?;
        done += rows;
    }
    Ok(best.finish(Strategy::Sample, n as u64, start))
}

/// One greedy rollout per forced first action, decoded in parallel over a shared cache.
pub fn multi_greedy<F: Real>(
    instance: &Arc<ProblemInstance>,
    model: &AttentionModel<F>,
    starts: &[usize],
) -> Result<SearchResult, SearchError> {
    if starts.is_empty() {
        return Err(SearchError::InvalidArgument("multi-greedy needs at least one start node".into()));
    }
    let allowed = all_starts(instance);
    if let Some(bad) = starts.iter().find(|s| !allowed.contains(s)) {
        return Err(SearchError::InvalidArgument(format!("{bad} is not a valid start node")));
    }
    let start = Instant::now();
    let (env, _) = run_rows(instance, model, starts.len(), Actor::GreedyFrom(starts))?;
    let mut best = Best::default();
    best.offer(instance, env.tours())?;
    Ok(best.finish(Strategy::MultiGreedy, starts.len() as u64, start))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveSearchConfig {
    /// Rollouts per epoch.
    pub batch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for ActiveSearchConfig {
    fn default() -> Self {
        ActiveSearchConfig { batch: 64, epochs: 10, learning_rate: 1e-4, max_grad_norm: 1.0, seed: 0 }
    }
}

/// REINFORCE fine-tuning of a private copy of the model on one instance.
///
/// Each epoch samples `batch` rollouts and offers them to the running best;
/// every epoch but the last then takes one step against the mean return of
/// its batch. Zero or one epoch reduces to `sample_rollouts(batch)`.
pub fn active_search<F: Real>(
    instance: &Arc<ProblemInstance>,
    model: &AttentionModel<F>,
    cfg: &ActiveSearchConfig,
) -> Result<SearchResult, SearchError> {
    if cfg.batch == 0 {
        return Err(SearchError::InvalidArgument("active search batch must be at least 1".into()));
    }
    let start = Instant::now();
    let mut policy = model.clone();
    let mut opt = Adam::new(cfg.learning_rate);
    let mut best = Best::default();
    let rounds = cfg.epochs.max(1);
    for r in 0..rounds {
        let mut rngs = row_rngs(cfg.seed, r * cfg.batch..(r + 1) * cfg.batch);
        let (env, buf) = run_rows(instance, &policy, cfg.batch, Actor::SampleRows(&mut rngs))?;
        best.offer(instance, env.tours())?;
        if r + 1 == rounds {
            break;
        }
        let mean = buf.episode_returns.iter().sum::<f64>() / buf.batch as f64;
        let baselines = vec![mean; buf.batch];
        let mut tape = Tape::new();
        let loss = reinforce_loss(&mut tape, &policy, &buf, &baselines, 0.0)?;
        let mut grads = tape.backward(loss.total).for_params(&tape, policy.params());
        clip_grad_norm(&mut grads, cfg.max_grad_norm);
        opt.step(policy.params_mut(), &grads);
        policy.apply_norm_updates(&loss.aux);
    }
    Ok(best.finish(Strategy::Active, (rounds * cfg.batch) as u64, start))
}
