use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::algo::{Actor, Policy};
use crate::model::AttentionModel;
use crate::nn::Real;
use crate::parallel::map_slice;
use crate::problems::{exact_optimal, generate_instance, heuristic_baseline, within_exact_cap, ProblemInstance, ProblemKind};
use crate::search::{run_strategy, SearchOptions, SearchResult, Strategy};
use crate::seeds::eval_instance_seed;

/// Which solver the gaps are measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// Exact optimum on every instance.
    Exact,
    /// Construction plus 2-opt heuristic on every instance.
    Heuristic,
}

impl Reference {
    pub fn as_str(self) -> &'static str {
        match self {
            Reference::Exact => "exact",
            Reference::Heuristic => "heuristic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub mean_length: f64,
    /// Population standard deviation over instances.
    pub std_length: f64,
    pub mean_gap: f64,
    pub std_gap: f64,
    pub total_samples_or_expansions: u64,
    /// Sum of per-instance search times, seconds.
    pub wall_time_s: f64,
    /// Per-instance best lengths in input order.
    pub lengths: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub reference: Reference,
    pub reference_mean_length: f64,
    pub instances: usize,
    /// Training env steps consumed by the evaluated model.
    pub env_steps: u64,
    pub wall_time_s: f64,
    pub strategies: Vec<StrategyReport>,
}

impl EvalReport {
    pub fn strategy(&self, s: Strategy) -> Option<&StrategyReport> {
        self.strategies.iter().find(|r| r.strategy == s)
    }
}

/// The `size` held-out instances of an evaluation set.
pub fn eval_instances(kind: ProblemKind, n: usize, size: usize, eval_seed: u64) -> Result<Vec<Arc<ProblemInstance>>, HarnessError> {
    (0..size as u64)
        .map(|i| Ok(Arc::new(generate_instance(kind, n, eval_instance_seed(eval_seed, i))?)))
        .collect()
}

/// Reference lengths: exact when every instance fits the exact solver, heuristic otherwise.
pub fn reference_lengths(instances: &[Arc<ProblemInstance>]) -> Result<(Reference, Vec<f64>), HarnessError> {
    if instances.iter().all(|i| within_exact_cap(i)) {
        let lens: Result<Vec<f64>, _> = map_slice(instances, |i| exact_optimal(i).map(|(l, _)| l)).into_iter().collect();
        Ok((Reference::Exact, lens?))
    } else {
        Ok((Reference::Heuristic, map_slice(instances, |i| heuristic_baseline(i).0)))
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs every strategy on every instance and summarizes lengths and gaps.
pub fn evaluate<F: Real>(
    model: &AttentionModel<F>,
    instances: &[Arc<ProblemInstance>],
    strategies: &[Strategy],
    opts: &SearchOptions,
    env_steps: u64,
) -> Result<EvalReport, HarnessError> {
    if instances.is_empty() {
        return Err(HarnessError::Config("evaluation needs at least one instance".into()));
    }
    let start = Instant::now();
    let (reference, refs) = reference_lengths(instances)?;
    let mut reports = Vec::new();
    for &s in strategies {
        let results: Result<Vec<SearchResult>, _> =
            map_slice(instances, |inst| run_strategy(s, inst, model, opts)).into_iter().collect();
        let results = results?;
        let lengths: Vec<f64> = results.iter().map(|r| r.best_length).collect();
        let gaps: Vec<f64> = lengths.iter().zip(&refs).map(|(l, r)| (l - r) / r).collect();
        let (mean_length, std_length) = mean_std(&lengths);
        let (mean_gap, std_gap) = mean_std(&gaps);
        reports.push(StrategyReport {
            strategy: s,
            mean_length,
            std_length,
            mean_gap,
            std_gap,
            total_samples_or_expansions: results.iter().map(|r| r.samples_or_expansions).sum(),
            wall_time_s: results.iter().map(|r| r.wall_time).sum(),
            lengths,
        });
    }
    Ok(EvalReport {
        reference,
        reference_mean_length: mean_std(&refs).0,
        instances: instances.len(),
        env_steps,
        wall_time_s: start.elapsed().as_secs_f64(),
        strategies: reports,
    })
}

/// Mean greedy tour length over a set, decoded as one batch.
pub fn greedy_mean_length<F: Real>(model: &AttentionModel<F>, instances: &[Arc<ProblemInstance>]) -> Result<f64, HarnessError> {
    let buf = model.rollouts(instances, 1, Actor::Greedy)?;
    Ok(-buf.episode_returns.iter().sum::<f64>() / instances.len().max(1) as f64)
}
