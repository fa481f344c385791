use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{DecodeMemo, SearchError, SearchResult, Strategy};
use crate::env::{tour_from_actions, RouteState};
use crate::model::AttentionModel;
use crate::nn::Real;
use crate::problems::{tour_length, ProblemInstance, ProblemKind, Tour};

pub const BNB_TSP_CAP: usize = 12;
pub const BNB_CVRP_CAP: usize = 7;

/// Order in which the children of a search node are tried.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchOrder {
    /// Descending policy probability, lower index first on ties.
    #[default]
    Policy,
    /// Ascending node index.
    Index,
    /// Ascending policy probability.
    Adversarial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnbOutcome {
    pub result: SearchResult,
    /// Every incumbent length in the order it was found.
    pub bound_history: Vec<f64>,
}

pub fn dfs_branch_and_bound<F: Real>(
    instance: &ProblemInstance,
    model: &AttentionModel<F>,
) -> Result<SearchResult, SearchError> {
    Ok(dfs_branch_and_bound_with(instance, model, BranchOrder::Policy)?.result)
}

struct Search<'a, 'm, F: Real> {
    instance: &'a ProblemInstance,
    memo: Option<DecodeMemo<'m, F>>,
    order: BranchOrder,
    bound: f64,
    best: Option<Vec<usize>>,
    history: Vec<f64>,
    expanded: u64,
    path: Vec<usize>,
}

impl<F: Real> Search<'_, '_, F> {
    fn children(&mut self, state: &RouteState) -> Result<Vec<(usize, RouteState)>, SearchError> {
        let mut kids = Vec::new();
        for a in (0..self.instance.num_nodes()).filter(|&a| state.permits(self.instance, a)) {
            let mut child = state.clone();
            child.apply(self.instance, a)?;
            if child.partial_length() < self.bound {
                kids.push((a, child));
            }
        }
        if let Some(memo) = self.memo.as_mut() {
            let lp = memo.get(state);
            let key = |a: usize| lp[a];
            match self.order {
                BranchOrder::Policy => kids.sort_by(|x, y| key(y.0).total_cmp(&key(x.0))),
                BranchOrder::Adversarial => kids.sort_by(|x, y| key(x.0).total_cmp(&key(y.0))),
                BranchOrder::Index => {}
            }
            let open: Vec<&RouteState> = kids.iter().map(|(_, c)| c).filter(|c| !c.is_done()).collect();
            memo.ensure(&open)?;
        }
        Ok(kids)
    }

    fn visit(&mut self, state: RouteState) -> Result<(), SearchError> {
        self.expanded += 1;
        if state.is_done() {
            let len = state.partial_length();
            if len < self.bound {
                self.bound = len;
                self.best = Some(self.path.clone());
                self.history.push(len);
            }
            return Ok(());
        }
        for (a, child) in self.children(&state)? {
            // the bound may have tightened since the children were generated
            if child.partial_length() >= self.bound {
                continue;
            }
            self.path.push(a);
            self.visit(child)?;
            self.path.pop();
        }
        Ok(())
    }
}

/// Exact depth-first branch-and-bound over action sequences.
///
/// A partial solution is pruned once its travelled length (open path for TSP,
/// routes so far for CVRP) reaches the incumbent. `samples_or_expansions`
/// counts search nodes visited.
pub fn dfs_branch_and_bound_with<F: Real>(
    instance: &ProblemInstance,
    model: &AttentionModel<F>,
    order: BranchOrder,
) -> Result<BnbOutcome, SearchError> {
    let cap = match instance.kind() {
        ProblemKind::Tsp => BNB_TSP_CAP,
        ProblemKind::Cvrp => BNB_CVRP_CAP,
    };
    if instance.n() > cap {
        return Err(SearchError::TooLarge { kind: instance.kind(), n: instance.n(), cap });
    }
    if model.kind() != instance.kind() {
        return Err(SearchError::InvalidArgument(format!("{} model on a {} instance", model.kind(), instance.kind())));
    }
    let start = Instant::now();
    let root = RouteState::new(instance);
    let memo = match order {
        BranchOrder::Index => None,
        _ => {
            let mut m = DecodeMemo::new(model, instance)?;
            m.ensure(&[&root])?;
            Some(m)
        }
    };
    let mut search = Search {
        instance,
        memo,
        order,
        bound: f64::INFINITY,
        best: None,
        history: Vec::new(),
        expanded: 0,
        path: Vec::new(),
    };
    search.visit(root)?;
    let actions = search.best.ok_or_else(|| SearchError::InvalidArgument("instance has no feasible tour".into()))?;
    let best_tour: Tour = tour_from_actions(instance.kind(), &actions);
    let best_length = tour_length(instance, &best_tour)?;
    Ok(BnbOutcome {
        result: SearchResult {
            best_tour,
            best_length,
            strategy: Strategy::Bnb,
            samples_or_expansions: search.expanded,
            wall_time: start.elapsed().as_secs_f64(),
        },
        bound_history: search.history,
    })
}
