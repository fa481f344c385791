use super::instance::{ProblemInstance, ProblemKind, CAPACITY_TOLERANCE};
use super::tour::{path_length, Tour};

/// Nearest-neighbour construction followed by 2-opt to local optimality.
///
/// For CVRP the construction returns to the depot whenever no unvisited
/// customer fits the remaining load, and 2-opt runs inside each route.
pub fn heuristic_baseline(instance: &ProblemInstance) -> (f64, Tour) {
    let dist = instance.distance_matrix();
    let nn = instance.num_nodes();
    let nodes = match instance.kind() {
        ProblemKind::Tsp => {
            let mut order = nearest_neighbor_tsp(&dist, nn);
            two_opt_cycle(&mut order, &dist, nn);
            order
        }
        ProblemKind::Cvrp => {
            let routes = nearest_neighbor_cvrp(instance, &dist);
            let mut nodes = vec![0];
            for mut r in routes {
                // route as a closed cycle through the depot
                r.insert(0, 0);
                two_opt_cycle(&mut r, &dist, nn);
                nodes.extend_from_slice(&r[1..]);
                nodes.push(0);
            }
            nodes
        }
    };
    let closed = instance.kind() == ProblemKind::Tsp;
    (path_length(instance, &nodes, closed), Tour::new(nodes))
}

fn nearest_neighbor_tsp(dist: &[f64], n: usize) -> Vec<usize> {
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut cur = 0;
    visited[0] = true;
    order.push(0);
    for _ in 1..n {
        let next = (0..n)
            .filter(|&j| !visited[j])
            .min_by(|&a, &b| dist[cur * n + a].total_cmp(&dist[cur * n + b]))
            .expect("unvisited node remains");
        visited[next] = true;
        order.push(next);
        cur = next;
    }
    order
}

fn nearest_neighbor_cvrp(instance: &ProblemInstance, dist: &[f64]) -> Vec<Vec<usize>> {
    let nn = instance.num_nodes();
    let capacity = instance.capacity().unwrap_or(f64::INFINITY);
    let mut visited = vec![false; nn];
    visited[0] = true;
    let mut remaining = instance.n();
    let mut routes = Vec::new();
    while remaining > 0 {
        let mut route = Vec::new();
        let mut load = capacity;
        let mut cur = 0;
        loop {
            let next = (1..nn)
                .filter(|&j| !visited[j] && instance.node_demand(j) <= load + CAPACITY_TOLERANCE)
                .min_by(|&a, &b| dist[cur * nn + a].total_cmp(&dist[cur * nn + b]));
            let Some(next) = next else { break };
            visited[next] = true;
            load -= instance.node_demand(next);
            route.push(next);
            remaining -= 1;
            cur = next;
        }
        routes.push(route);
    }
    routes
}

/// 2-opt on a cyclic sequence; position 0 stays fixed.
fn two_opt_cycle(order: &mut [usize], dist: &[f64], nn: usize) {
    let n = order.len();
    if n < 4 {
        return;
    }
    let d = |a: usize, b: usize| dist[a * nn + b];
    let mut improved = true;
    while improved {
        improved = false;
        for i in 0..n - 2 {
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (a, b) = (order[i], order[i + 1]);
                let (c, e) = (order[j], order[(j + 1) % n]);
                let delta = d(a, c) + d(b, e) - d(a, b) - d(c, e);
                if delta < -1e-12 {
                    order[i + 1..=j].reverse();
                    improved = true;
                }
            }
        }
    }
}
