use smallvec::{smallvec, SmallVec};

use crate::problems::{ProblemInstance, ProblemKind, CAPACITY_TOLERANCE};

use super::EnvError;

/// Fixed-size bitset over node indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeSet {
    words: SmallVec<[u64; 2]>,
}

impl NodeSet {
    pub fn new(n: usize) -> Self {
        NodeSet { words: smallvec![0; n.div_ceil(64).max(1)] }
    }

    #[inline]
    pub fn contains(&self, i: usize) -> bool {
        self.words[i >> 6] & (1u64 << (i & 63)) != 0
    }

    #[inline]
    pub fn insert(&mut self, i: usize) {
        self.words[i >> 6] |= 1u64 << (i & 63);
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }
}

/// Everything the decoder conditions on; equal keys give identical policy outputs.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DecisionKey {
    visited: NodeSet,
    first: Option<usize>,
    last: Option<usize>,
    load_bits: u64,
    initial: bool,
}

/// Transition state of one routing episode.
///
/// This is the single source of truth for the masking and transition rules;
/// the scalar environment, search routines and tests all go through it.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteState {
    visited: NodeSet,
    first: Option<usize>,
    last: Option<usize>,
    steps: usize,
    served: usize,
    load: f64,
    length: f64,
    done: bool,
}

impl RouteState {
    pub fn new(instance: &ProblemInstance) -> Self {
        let (last, load) = match instance.kind() {
            ProblemKind::Tsp => (None, 0.0),
            ProblemKind::Cvrp => (Some(0), instance.capacity().unwrap_or(0.0)),
        };
        RouteState {
            visited: NodeSet::new(instance.num_nodes()),
            first: None,
            last,
            steps: 0,
            served: 0,
            load,
            length: 0.0,
            done: false,
        }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn first_node(&self) -> Option<usize> {
        self.first
    }

    /// Current vehicle position. For CVRP this is the depot at reset.
    pub fn last_node(&self) -> Option<usize> {
        self.last
    }

    pub fn remaining_load(&self) -> f64 {
        self.load
    }

    /// Length travelled so far along the open path (no closing edge until done).
    pub fn partial_length(&self) -> f64 {
        self.length
    }

    pub fn is_visited(&self, node: usize) -> bool {
        self.visited.contains(node)
    }

    pub fn is_initial(&self) -> bool {
        self.steps == 0
    }

    pub fn decision_key(&self) -> DecisionKey {
        DecisionKey {
            visited: self.visited.clone(),
            first: self.first,
            last: self.last,
            load_bits: self.load.to_bits(),
            initial: self.is_initial(),
        }
    }

    /// Whether `action` is currently allowed. Always false once done.
    #[inline]
    pub fn permits(&self, instance: &ProblemInstance, action: usize) -> bool {
        if self.done || action >= instance.num_nodes() {
            return false;
        }
        match instance.kind() {
            ProblemKind::Tsp => !self.visited.contains(action),
            ProblemKind::Cvrp => {
                if action == 0 {
                    self.last != Some(0)
                } else {
                    !self.visited.contains(action)
                        && instance.node_demand(action) <= self.load + CAPACITY_TOLERANCE
                }
            }
        }
    }

    /// Fills `out[j] = permits(j)`; `out.len()` must equal the node count.
    pub fn fill_mask(&self, instance: &ProblemInstance, out: &mut [bool]) {
        for (j, slot) in out.iter_mut().enumerate() {
            *slot = self.permits(instance, j);
        }
    }

    pub fn mask(&self, instance: &ProblemInstance) -> Vec<bool> {
        let mut m = vec![false; instance.num_nodes()];
        self.fill_mask(instance, &mut m);
        m
    }

    /// Applies an action and returns the distance it adds to the objective
    /// (for the final TSP step this includes the closing edge).
    pub fn apply(&mut self, instance: &ProblemInstance, action: usize) -> Result<f64, EnvError> {
        if self.done {
            return Err(EnvError::Terminal);
        }
        if !self.permits(instance, action) {
            return Err(EnvError::IllegalAction { row: 0, action });
        }
        let travelled = match instance.kind() {
            ProblemKind::Tsp => {
                let d = match self.last {
                    Some(prev) => instance.dist(prev, action),
                    None => {
                        self.first = Some(action);
                        0.0
                    }
                };
                self.visited.insert(action);
                self.served += 1;
                self.last = Some(action);
                self.steps += 1;
                let mut total = d;
                if self.served == instance.n() {
                    self.done = true;
                    total += instance.dist(action, self.first.unwrap_or(action));
                }
                total
            }
            ProblemKind::Cvrp => {
                let prev = self.last.unwrap_or(0);
                let d = instance.dist(prev, action);
                if action == 0 {
                    self.load = instance.capacity().unwrap_or(0.0);
                } else {
                    self.visited.insert(action);
                    self.served += 1;
                    self.load = (self.load - instance.node_demand(action)).max(0.0);
                    if self.first.is_none() {
                        self.first = Some(action);
                    }
                }
                self.last = Some(action);
                self.steps += 1;
                if action == 0 && self.served == instance.n() {
                    self.done = true;
                }
                d
            }
        };
        self.length += travelled;
        Ok(travelled)
    }

    /// Remaining demand per node (0 for the depot and for served customers).
    pub fn remaining_demand(&self, instance: &ProblemInstance) -> Vec<f64> {
        (0..instance.num_nodes())
            .map(|j| if self.visited.contains(j) { 0.0 } else { instance.node_demand(j) })
            .collect()
    }
}
