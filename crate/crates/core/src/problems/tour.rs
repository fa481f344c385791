use serde::{Deserialize, Serialize};

use super::instance::{ProblemInstance, ProblemKind, CAPACITY_TOLERANCE};
use super::ProblemError;

/// A complete solution as a node sequence.
///
/// TSP: a permutation of `0..n`, the closing edge is implicit.
/// CVRP: starts and ends at depot `0`, each customer appears once.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tour {
    pub nodes: Vec<usize>,
}

impl Tour {
    pub fn new(nodes: Vec<usize>) -> Self {
        Tour { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Rotates a TSP tour to start at node 0 and picks the direction whose
    /// second node is smaller. Only meant for comparing tours.
    pub fn canonical_tsp(&self) -> Tour {
        let n = self.nodes.len();
        if n < 3 {
            let mut v = self.nodes.clone();
            v.sort_unstable();
            return Tour::new(v);
        }
        let start = self.nodes.iter().position(|&x| x == 0).unwrap_or(0);
        let fwd: Vec<usize> = (0..n).map(|k| self.nodes[(start + k) % n]).collect();
        let bwd: Vec<usize> = (0..n).map(|k| self.nodes[(start + n - k) % n]).collect();
        Tour::new(if fwd[1] <= bwd[1] { fwd } else { bwd })
    }
}

impl From<Vec<usize>> for Tour {
    fn from(nodes: Vec<usize>) -> Self {
        Tour { nodes }
    }
}

/// A single violated tour constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    EmptyTour,
    NodeOutOfRange { node: usize },
    MissingNode { node: usize },
    Repeat { node: usize },
    CapacityOverflow { route: usize, load: f64, capacity: f64 },
    MustStartAtDepot,
    MustEndAtDepot,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::EmptyTour => write!(f, "empty tour"),
            Violation::NodeOutOfRange { node } => write!(f, "node {node} out of range"),
            Violation::MissingNode { node } => write!(f, "missing node {node}"),
            Violation::Repeat { node } => write!(f, "repeat of node {node}"),
            Violation::CapacityOverflow { route, load, capacity } => {
                write!(f, "capacity overflow on route {route}: load {load} > {capacity}")
            }
            Violation::MustStartAtDepot => write!(f, "route must start at the depot"),
            Violation::MustEndAtDepot => write!(f, "route must end at the depot"),
        }
    }
}

/// Outcome of [`validate_tour`]: empty means feasible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub violations: Vec<Violation>,
}

impl ValidityReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("feasible");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Lists every violated tour invariant.
pub fn validate_tour(instance: &ProblemInstance, tour: &Tour) -> ValidityReport {
    let mut violations = Vec::new();
    let nodes = &tour.nodes;
    if nodes.is_empty() {
        violations.push(Violation::EmptyTour);
        return ValidityReport { violations };
    }
    let nn = instance.num_nodes();
    let mut seen = vec![0usize; nn];
    for &v in nodes {
        if v >= nn {
            violations.push(Violation::NodeOutOfRange { node: v });
        } else {
            seen[v] += 1;
        }
    }
    let first_customer = match instance.kind() {
        ProblemKind::Tsp => 0,
        ProblemKind::Cvrp => 1,
    };
    for (v, &count) in seen.iter().enumerate().skip(first_customer) {
        if count == 0 {
            violations.push(Violation::MissingNode { node: v });
        } else if count > 1 {
            violations.push(Violation::Repeat { node: v });
        }
    }
    if instance.kind() == ProblemKind::Cvrp {
        if nodes[0] != 0 {
            violations.push(Violation::MustStartAtDepot);
        }
        if *nodes.last().unwrap() != 0 {
            violations.push(Violation::MustEndAtDepot);
        }
        let capacity = instance.capacity().unwrap_or(f64::INFINITY);
        let mut load = 0.0;
        let mut route = 0;
        for &v in nodes {
            if v == 0 {
                if load > capacity + CAPACITY_TOLERANCE {
                    violations.push(Violation::CapacityOverflow { route, load, capacity });
                }
                if load > 0.0 {
                    route += 1;
                }
                load = 0.0;
            } else if v < nn {
                load += instance.node_demand(v);
            }
        }
        if load > capacity + CAPACITY_TOLERANCE {
            violations.push(Violation::CapacityOverflow { route, load, capacity });
        }
    }
    ValidityReport { violations }
}

/// Length of a node sequence without feasibility checks.
///
/// `closed` adds the edge from the last node back to the first.
pub fn path_length(instance: &ProblemInstance, nodes: &[usize], closed: bool) -> f64 {
    let mut total: f64 = nodes.windows(2).map(|w| instance.dist(w[0], w[1])).sum();
    if closed && nodes.len() > 1 {
        total += instance.dist(*nodes.last().unwrap(), nodes[0]);
    }
    total
}

/// Objective value of a feasible tour.
pub fn tour_length(instance: &ProblemInstance, tour: &Tour) -> Result<f64, ProblemError> {
    let report = validate_tour(instance, tour);
    if !report.is_feasible() {
        return Err(ProblemError::Infeasible(report));
    }
    Ok(path_length(instance, &tour.nodes, instance.kind() == ProblemKind::Tsp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::generate_instance;

    fn corners() -> ProblemInstance {
        ProblemInstance::tsp(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap()
    }

    #[test]
    fn unit_square_perimeter() {
        assert_eq!(tour_length(&corners(), &Tour::new(vec![0, 1, 2, 3])).unwrap(), 4.0);
    }

    #[test]
    fn coincident_nodes_have_zero_length() {
        let inst = ProblemInstance::tsp(vec![[0.3, 0.3]; 5]).unwrap();
        assert_eq!(tour_length(&inst, &Tour::new(vec![4, 2, 0, 1, 3])).unwrap(), 0.0);
    }

    #[test]
    fn matches_edge_by_edge_resummation() {
        let inst = generate_instance(ProblemKind::Tsp, 7, 99).unwrap();
        let order = vec![3, 0, 6, 2, 5, 1, 4];
        let pts = inst.coords();
        let mut oracle = 0.0;
        for k in 0..7 {
            let a = pts[order[k]];
            let b = pts[order[(k + 1) % 7]];
            oracle += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        }
        let got = tour_length(&inst, &Tour::new(order)).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn permutation_is_feasible_and_repeat_is_not() {
        let inst = generate_instance(ProblemKind::Tsp, 5, 1).unwrap();
        assert!(validate_tour(&inst, &Tour::new(vec![4, 3, 2, 1, 0])).is_feasible());
        let r = validate_tour(&inst, &Tour::new(vec![0, 1, 2, 2, 4]));
        assert!(r.violations.contains(&Violation::Repeat { node: 2 }));
        assert!(r.violations.contains(&Violation::MissingNode { node: 3 }));
        assert!(matches!(
            tour_length(&inst, &Tour::new(vec![0, 1, 2, 2, 4])),
            Err(ProblemError::Infeasible(_))
        ));
    }

    #[test]
    fn capacity_overflow_is_reported() {
        let eps = 1e-6;
        let inst = ProblemInstance::cvrp(
            [0.5, 0.5],
            vec![[0.1, 0.1], [0.9, 0.9], [0.2, 0.8]],
            vec![0.5, 0.5 + eps, 0.3],
            1.0,
        )
        .unwrap();
        let r = validate_tour(&inst, &Tour::new(vec![0, 1, 2, 0, 3, 0]));
        assert!(matches!(r.violations[..], [Violation::CapacityOverflow { route: 0, .. }]));
        let ok = validate_tour(&inst, &Tour::new(vec![0, 1, 3, 0, 2, 0]));
        assert!(ok.is_feasible());
    }

    #[test]
    fn cvrp_must_be_depot_anchored() {
        let inst = ProblemInstance::cvrp([0.5, 0.5], vec![[0.1, 0.1]], vec![0.5], 1.0).unwrap();
        let r = validate_tour(&inst, &Tour::new(vec![1, 0]));
        assert_eq!(r.violations, vec![Violation::MustStartAtDepot]);
        let len = tour_length(&inst, &Tour::new(vec![0, 1, 0])).unwrap();
        assert!((len - 2.0 * (0.32f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn canonical_form_identifies_rotations_and_reversals() {
        let t = Tour::new(vec![2, 3, 0, 1]);
        let r = Tour::new(vec![1, 0, 3, 2]);
        assert_eq!(t.canonical_tsp(), r.canonical_tsp());
        assert_eq!(t.canonical_tsp().nodes, vec![0, 1, 2, 3]);
    }
}
