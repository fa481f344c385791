use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{DecodeMemo, SearchError, SearchResult, Strategy};
use crate::env::{tour_from_actions, RouteState};
use crate::model::AttentionModel;
use crate::nn::Real;
use crate::problems::{tour_length, ProblemInstance, ProblemKind};

/// A completed beam sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamCandidate {
    pub actions: Vec<usize>,
    /// Sum of per-step log-probabilities.
    pub score: f64,
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamOutcome {
    pub result: SearchResult,
    /// Final pool in completion order; empty unless requested.
    pub finished: Vec<BeamCandidate>,
    /// Distinct decoder inputs evaluated.
    pub decoded: usize,
}

/// Width that keeps every action sequence alive.
///
/// TSP: `n!`. CVRP: `n!·2^(n−1)` (a depot return may follow any customer but
/// the last). Saturates at `usize::MAX`.
pub fn exhaustive_width(kind: ProblemKind, n: usize) -> usize {
    let fact = (2..=n).try_fold(1usize, |acc, k| acc.checked_mul(k));
    let total = match kind {
        ProblemKind::Tsp => fact,
        ProblemKind::Cvrp => fact.and_then(|f| f.checked_mul(1usize.checked_shl(n.saturating_sub(1) as u32)?)),
    };
    total.unwrap_or(usize::MAX)
}

struct Entry {
    state: RouteState,
    score: f64,
    node: u32,
}

const ROOT: u32 = u32::MAX;

pub fn beam_search<F: Real>(
    instance: &std::sync::Arc<ProblemInstance>,
    model: &AttentionModel<F>,
    width: usize,
) -> Result<SearchResult, SearchError> {
    Ok(run(instance, model, width, false)?.result)
}

/// Beam search over summed log-probabilities.
///
/// Each depth expands every kept sequence by its feasible actions, keeps the
/// `width` best candidates (stable by insertion order on equal scores) and
/// moves the completed ones into the final pool. `samples_or_expansions`
/// counts the kept sequences expanded.
pub fn beam_search_detailed<F: Real>(
    instance: &ProblemInstance,
    model: &AttentionModel<F>,
    width: usize,
) -> Result<BeamOutcome, SearchError> {
    run(instance, model, width, true)
}

fn run<F: Real>(
    instance: &ProblemInstance,
    model: &AttentionModel<F>,
    width: usize,
    keep_pool: bool,
) -> Result<BeamOutcome, SearchError> {
    if width == 0 {
        return Err(SearchError::InvalidArgument("beam width must be at least 1".into()));
    }
    if model.kind() != instance.kind() {
        return Err(SearchError::InvalidArgument(format!("{} model on a {} instance", model.kind(), instance.kind())));
    }
    let start = Instant::now();
    let nn = instance.num_nodes();
    let mut memo = DecodeMemo::new(model, instance)?;
    // (parent, action) per kept sequence
    let mut arena: Vec<(u32, u32)> = Vec::new();
    let mut finished: Vec<(u32, f64, f64)> = Vec::new();
    let mut beam = vec![Entry { state: RouteState::new(instance), score: 0.0, node: ROOT }];
    let mut expanded = 0u64;
    while !beam.is_empty() {
        let refs: Vec<&RouteState> = beam.iter().map(|e| &e.state).collect();
        memo.ensure(&refs)?;
        expanded += beam.len() as u64;
        let mut cands: Vec<(u32, u32, f64)> = Vec::new();
        for (p, e) in beam.iter().enumerate() {
            let row = memo.get(&e.state);
            for (a, &lp) in row.iter().enumerate().take(nn) {
                if lp.is_finite() && e.state.permits(instance, a) {
                    cands.push((p as u32, a as u32, e.score + lp));
                }
            }
        }
        cands.sort_by(|x, y| y.2.total_cmp(&x.2));
        cands.truncate(width);
        let mut next = Vec::with_capacity(cands.len());
        for (p, a, score) in cands {
            let parent = &beam[p as usize];
            let mut state = parent.state.clone();
            state.apply(instance, a as usize)?;
            let node = u32::try_from(arena.len())
                .map_err(|_| SearchError::InvalidArgument("beam search exceeded 2^32 kept sequences".into()))?;
            arena.push((parent.node, a));
            if state.is_done() {
                finished.push((node, score, state.partial_length()));
            } else {
                next.push(Entry { state, score, node });
            }
        }
        beam = next;
    }
    let actions_of = |mut node: u32| {
        let mut acts = Vec::new();
        while node != ROOT {
            let (p, a) = arena[node as usize];
            acts.push(a as usize);
            node = p;
        }
        acts.reverse();
        acts
    };
    let best = finished
        .iter()
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .ok_or_else(|| SearchError::InvalidArgument("beam search completed no sequence".into()))?;
    let best_tour = tour_from_actions(instance.kind(), &actions_of(best.0));
    let finished = if keep_pool {
        finished
            .iter()
            .map(|&(node, score, length)| BeamCandidate { actions: actions_of(node), score, length })
            .collect()
    } else {
        Vec::new()
    };
    let best_length = tour_length(instance, &best_tour)?;
    Ok(BeamOutcome {
        result: SearchResult {
            best_tour,
            best_length,
            strategy: Strategy::Beam,
            samples_or_expansions: expanded,
            wall_time: start.elapsed().as_secs_f64(),
        },
        decoded: memo.distinct(),
        finished,
    })
}
