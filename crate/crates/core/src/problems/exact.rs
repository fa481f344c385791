//! Exact solvers used as verification oracles at desk scale.

use super::instance::{ProblemInstance, ProblemKind, CAPACITY_TOLERANCE};
use super::tour::Tour;
use super::ProblemError;

/// Largest TSP handled by [`exact_optimal`] (Held–Karp).
pub const TSP_EXACT_CAP: usize = 15;
/// Largest CVRP handled by [`exact_optimal`] (subset enumeration).
pub const CVRP_EXACT_CAP: usize = 8;

/// Whether [`exact_optimal`] accepts the instance.
pub fn within_exact_cap(instance: &ProblemInstance) -> bool {
    match instance.kind() {
        ProblemKind::Tsp => instance.n() <= TSP_EXACT_CAP,
        ProblemKind::Cvrp => instance.n() <= CVRP_EXACT_CAP,
    }
}

/// Globally optimal objective value and one optimal tour.
pub fn exact_optimal(instance: &ProblemInstance) -> Result<(f64, Tour), ProblemError> {
    match instance.kind() {
        ProblemKind::Tsp => {
            if instance.n() > TSP_EXACT_CAP {
                return Err(ProblemError::SizeCap { n: instance.n(), cap: TSP_EXACT_CAP });
            }
            Ok(held_karp(instance))
        }
        ProblemKind::Cvrp => {
            if instance.n() > CVRP_EXACT_CAP {
                return Err(ProblemError::SizeCap { n: instance.n(), cap: CVRP_EXACT_CAP });
            }
            Ok(cvrp_exact(instance))
        }
    }
}

/// Shortest Hamiltonian paths from `start` over subsets of `others`.
///
/// Returns `dp[mask * k + j]` = shortest path starting at `start`, visiting
/// exactly the nodes of `mask` (bits index into `others`) and ending at
/// `others[j]`, plus the matching predecessor table.
fn subset_paths(dist: &[f64], nn: usize, start: usize, others: &[usize]) -> (Vec<f64>, Vec<u8>) {
    let k = others.len();
    let full = 1usize << k;
    let mut dp = vec![f64::INFINITY; full * k];
    let mut parent = vec![u8::MAX; full * k];
    for (j, &v) in others.iter().enumerate() {
        dp[(1 << j) * k + j] = dist[start * nn + v];
    }
    for mask in 1..full {
        for j in 0..k {
            if mask & (1 << j) == 0 {
                continue;
            }
            let cur = dp[mask * k + j];
            if !cur.is_finite() {
                continue;
            }
            for t in 0..k {
                if mask & (1 << t) != 0 {
                    continue;
                }
                let next = mask | (1 << t);
                let cand = cur + dist[others[j] * nn + others[t]];
                if cand < dp[next * k + t] {
                    dp[next * k + t] = cand;
                    parent[next * k + t] = j as u8;
                }
            }
        }
    }
    (dp, parent)
}

fn unwind(parent: &[u8], k: usize, mut mask: usize, mut j: usize, others: &[usize]) -> Vec<usize> {
    let mut rev = Vec::new();
    loop {
        rev.push(others[j]);
        let p = parent[mask * k + j];
        mask &= !(1 << j);
        if p == u8::MAX {
            break;
        }
        j = p as usize;
    }
    rev.reverse();
    rev
}

fn held_karp(instance: &ProblemInstance) -> (f64, Tour) {
    let n = instance.n();
    if n == 1 {
        return (0.0, Tour::new(vec![0]));
    }
    let dist = instance.distance_matrix();
    let others: Vec<usize> = (1..n).collect();
    let k = others.len();
    let (dp, parent) = subset_paths(&dist, n, 0, &others);
    let full = (1usize << k) - 1;
    let mut best = f64::INFINITY;
    let mut best_j = 0;
    for j in 0..k {
        let c = dp[full * k + j] + dist[others[j] * n];
        if c < best {
            best = c;
            best_j = j;
        }
    }
    let mut nodes = vec![0];
    nodes.extend(unwind(&parent, k, full, best_j, &others));
    (best, Tour::new(nodes))
}

fn cvrp_exact(instance: &ProblemInstance) -> (f64, Tour) {
    let n = instance.n();
    let nn = instance.num_nodes();
    let dist = instance.distance_matrix();
    let capacity = instance.capacity().unwrap_or(f64::INFINITY);
    let customers: Vec<usize> = (1..=n).collect();
    let full = 1usize << n;
    let (dp, parent) = subset_paths(&dist, nn, 0, &customers);

    // best closed route over each feasible customer subset
    let mut route_cost = vec![f64::INFINITY; full];
    let mut route_end = vec![usize::MAX; full];
    for mask in 1..full {
        let load: f64 = (0..n).filter(|j| mask & (1 << j) != 0).map(|j| instance.node_demand(j + 1)).sum();
        if load > capacity + CAPACITY_TOLERANCE {
            continue;
        }
        for j in 0..n {
            if mask & (1 << j) == 0 {
                continue;
            }
            let c = dp[mask * n + j] + dist[customers[j] * nn];
            if c < route_cost[mask] {
                route_cost[mask] = c;
                route_end[mask] = j;
            }
        }
    }

    // partition customers into routes; each step peels the route holding the lowest customer
    let mut best = vec![f64::INFINITY; full];
    let mut choice = vec![0usize; full];
    best[0] = 0.0;
    for mask in 1..full {
        let low = mask & mask.wrapping_neg();
        let rest = mask ^ low;
        let mut sub = rest;
        loop {
            let route = sub | low;
            let c = route_cost[route] + best[mask ^ route];
            if c < best[mask] {
                best[mask] = c;
                choice[mask] = route;
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
    }

    let mut nodes = vec![0];
    let mut mask = full - 1;
    while mask != 0 {
        let route = choice[mask];
        nodes.extend(unwind(&parent, n, route, route_end[route], &customers));
        nodes.push(0);
        mask ^= route;
    }
    (best[full - 1], Tour::new(nodes))
}
