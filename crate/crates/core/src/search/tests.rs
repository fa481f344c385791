use std::sync::Arc;

use super::*;
use crate::algo::{collect_rollouts, Actor};
use crate::env::{RewardMode, VectorEnv};
use crate::model::ModelConfig;
use crate::problems::{exact_optimal, generate_instance, validate_tour};

fn tsp(n: usize, seed: u64) -> Arc<ProblemInstance> {
    Arc::new(generate_instance(ProblemKind::Tsp, n, seed).unwrap())
}

fn cvrp(n: usize, seed: u64) -> Arc<ProblemInstance> {
    Arc::new(generate_instance(ProblemKind::Cvrp, n, seed).unwrap())
}

fn model(kind: ProblemKind, seed: u64) -> AttentionModel<f64> {
    AttentionModel::new(kind, ModelConfig::tiny(), seed).unwrap()
}

fn check(inst: &ProblemInstance, r: &SearchResult) {
    assert!(validate_tour(inst, &r.best_tour).is_feasible(), "{:?}", r.best_tour);
    assert!((tour_length(inst, &r.best_tour).unwrap() - r.best_length).abs() < 1e-12);
}

use crate::problems::tour_length;

/// Sum of the stored log-probabilities of a scripted rollout.
fn rescore(inst: &Arc<ProblemInstance>, m: &AttentionModel<f64>, actions: &[usize]) -> f64 {
    let mut env = VectorEnv::from_instances(vec![inst.clone()], 1, RewardMode::PerStep).unwrap();
    let script = vec![actions.to_vec()];
    let buf = collect_rollouts(&mut env, m, actions.len(), Actor::Script(&script)).unwrap();
    buf.log_probs.iter().zip(&buf.valid).filter(|(_, v)| **v).map(|(l, _)| l).sum()
}

#[test]
fn two_city_tsp_has_one_tour() {
    let inst = Arc::new(ProblemInstance::tsp(vec![[0.0, 0.0], [0.3, 0.4]]).unwrap());
    let m = model(ProblemKind::Tsp, 1);
    for s in Strategy::ALL {
        let r = run_strategy(s, &inst, &m, &SearchOptions { samples: 4, epochs: 2, ..Default::default() }).unwrap();
        assert!((r.best_length - 1.0).abs() < 1e-12, "{s}");
        assert_eq!(r.strategy, s);
    }
}

#[test]
fn every_strategy_is_feasible() {
    let opts = SearchOptions { width: 3, samples: 8, epochs: 2, ..Default::default() };
    for seed in 0..6 {
        for inst in [tsp(7, seed), cvrp(6, seed)] {
            let m = model(inst.kind(), seed);
            for s in Strategy::ALL {
                check(&inst, &run_strategy(s, &inst, &m, &opts).unwrap());
            }
        }
    }
}

#[test]
fn greedy_is_deterministic_and_feasible_under_random_parameters() {
    for seed in 0..100 {
        let inst = tsp(6 + (seed as usize % 5), 1000 + seed);
        let m = model(ProblemKind::Tsp, seed);
        let a = greedy_rollout(&inst, &m).unwrap();
        check(&inst, &a);
        assert_eq!(a.best_tour, greedy_rollout(&inst, &m).unwrap().best_tour);
    }
}

#[test]
fn width_one_beam_is_greedy() {
    for seed in 0..10 {
        for inst in [tsp(8, seed), cvrp(6, seed)] {
            let m = model(inst.kind(), 10 + seed);
            let g = greedy_rollout(&inst, &m).unwrap();
            let b = beam_search(&inst, &m, 1).unwrap();
            assert_eq!(g.best_tour, b.best_tour);
        }
    }
}

#[test]
fn exhaustive_beam_and_bnb_are_exact() {
    for seed in 0..12 {
        let n = 4 + seed as usize % 4;
        let inst = tsp(n, 300 + seed);
        let m = model(ProblemKind::Tsp, seed);
        let (opt, _) = exact_optimal(&inst).unwrap();
        let beam = beam_search(&inst, &m, exhaustive_width(ProblemKind::Tsp, n)).unwrap();
        assert!((beam.best_length - opt).abs() < 1e-9);
        for order in [BranchOrder::Policy, BranchOrder::Index, BranchOrder::Adversarial] {
            let b = dfs_branch_and_bound_with(&inst, &m, order).unwrap();
            assert!((b.result.best_length - opt).abs() < 1e-9, "{order:?}");
        }
    }
    for seed in 0..6 {
        let inst = cvrp(4 + seed as usize % 3, 400 + seed);
        let m = model(ProblemKind::Cvrp, seed);
        let (opt, _) = exact_optimal(&inst).unwrap();
        let b = dfs_branch_and_bound(&inst, &m).unwrap();
        assert!((b.best_length - opt).abs() < 1e-9);
        check(&inst, &b);
    }
}

#[test]
fn bnb_bounds_strictly_decrease() {
    for seed in 0..8 {
        let inst = tsp(9, 500 + seed);
        let out = dfs_branch_and_bound_with(&inst, &model(ProblemKind::Tsp, seed), BranchOrder::Adversarial).unwrap();
        assert!(!out.bound_history.is_empty());
        assert!(out.bound_history.windows(2).all(|w| w[1] < w[0]));
        assert!((out.bound_history.last().unwrap() - out.result.best_length).abs() < 1e-12);
    }
}

#[test]
fn bnb_rejects_oversized_instances() {
    let m = model(ProblemKind::Tsp, 0);
    assert!(matches!(dfs_branch_and_bound(&tsp(BNB_TSP_CAP + 1, 0), &m), Err(SearchError::TooLarge { .. })));
    let m = model(ProblemKind::Cvrp, 0);
    assert!(matches!(dfs_branch_and_bound(&cvrp(BNB_CVRP_CAP + 1, 0), &m), Err(SearchError::TooLarge { .. })));
}

#[test]
fn beam_scores_are_summed_log_probs() {
    for (inst, w) in [(tsp(6, 7), 20), (cvrp(5, 8), 30)] {
        let m = model(inst.kind(), 3);
        let out = beam_search_detailed(&inst, &m, w).unwrap();
        assert!(!out.finished.is_empty());
        for c in &out.finished {
            assert!((rescore(&inst, &m, &c.actions) - c.score).abs() < 1e-9);
            let tour = crate::env::tour_from_actions(inst.kind(), &c.actions);
            assert!((tour_length(&inst, &tour).unwrap() - c.length).abs() < 1e-9);
        }
        assert!(out.result.samples_or_expansions > 0);
    }
}

#[test]
fn beam_rejects_zero_width() {
    assert!(matches!(beam_search(&tsp(5, 0), &model(ProblemKind::Tsp, 0), 0), Err(SearchError::InvalidArgument(_))));
}

#[test]
fn exhaustive_width_values() {
    assert_eq!(exhaustive_width(ProblemKind::Tsp, 5), 120);
    assert_eq!(exhaustive_width(ProblemKind::Cvrp, 3), 24);
    assert_eq!(exhaustive_width(ProblemKind::Tsp, 40), usize::MAX);
}

#[test]
fn sampling_is_monotone_in_nested_sample_sets() {
    let inst = tsp(8, 11);
    let m = model(ProblemKind::Tsp, 11);
    let mut prev = f64::INFINITY;
    for n in [1, 2, 5, 17, 64, 200] {
        let r = sample_rollouts(&inst, &m, n, 99).unwrap();
        assert!(r.best_length <= prev);
        prev = r.best_length;
    }
}

#[test]
fn sampling_a_one_hot_policy_is_greedy() {
    // a huge clip scale turns small compatibility gaps into a one-hot policy
    let inst = tsp(6, 12);
    let mut cfg = ModelConfig::tiny();
    cfg.logit_clip = 1e6;
    let m = AttentionModel::<f64>::new(ProblemKind::Tsp, cfg, 5).unwrap();
    let g = greedy_rollout(&inst, &m).unwrap();
    assert_eq!(sample_rollouts(&inst, &m, 1, 4).unwrap().best_tour, g.best_tour);
}

#[test]
fn uniform_sampling_finds_the_optimum_of_a_small_instance() {
    // zero weights give a uniform policy over feasible nodes
    let inst = tsp(6, 13);
    let mut m = model(ProblemKind::Tsp, 0);
    for p in 0..m.params().len() {
        for x in m.params_mut().value_mut(p).data_mut() {
            *x = 0.0;
        }
    }
    let (opt, _) = exact_optimal(&inst).unwrap();
    let r = sample_rollouts(&inst, &m, 1000, 3).unwrap();
    assert!((r.best_length - opt).abs() < 1e-9);
}

#[test]
fn multi_greedy_matches_forced_decodes() {
    let inst = tsp(8, 14);
    let m = model(ProblemKind::Tsp, 14);
    let starts = all_starts(&inst);
    let mg = multi_greedy(&inst, &m, &starts).unwrap();
    let mut best = f64::INFINITY;
    for &s in &starts {
        let r = multi_greedy(&inst, &m, &[s]).unwrap();
        assert_eq!(r.best_tour.nodes[0], s);
        best = best.min(r.best_length);
    }
    assert_eq!(mg.best_length, best);
    assert!(mg.best_length <= greedy_rollout(&inst, &m).unwrap().best_length);
    let g = greedy_rollout(&inst, &m).unwrap();
    let own = multi_greedy(&inst, &m, &[g.best_tour.nodes[0]]).unwrap();
    assert_eq!(own.best_tour, g.best_tour);
}

#[test]
fn multi_greedy_cvrp_starts_are_customers() {
    let inst = cvrp(5, 15);
    assert_eq!(all_starts(&inst), vec![1, 2, 3, 4, 5]);
    let m = model(ProblemKind::Cvrp, 1);
    assert!(multi_greedy(&inst, &m, &[0]).is_err());
    assert!(multi_greedy(&inst, &m, &[]).is_err());
    let r = multi_greedy(&inst, &m, &[3]).unwrap();
    assert_eq!(r.best_tour.nodes[1], 3);
}

#[test]
fn active_search_isolation_and_degenerate_epochs() {
    let inst = tsp(7, 16);
    let m = model(ProblemKind::Tsp, 16);
    let before = m.params().clone();
    let cfg = ActiveSearchConfig { batch: 16, epochs: 0, learning_rate: 1e-2, seed: 5, ..Default::default() };
    let zero = active_search(&inst, &m, &cfg).unwrap();
    let sampled = sample_rollouts(&inst, &m, 16, 5).unwrap();
    assert_eq!(zero.best_tour, sampled.best_tour);
    let long = active_search(&inst, &m, &ActiveSearchConfig { epochs: 5, ..cfg }).unwrap();
    assert!(long.best_length <= zero.best_length);
    assert_eq!(long.samples_or_expansions, 80);
    for p in 0..before.len() {
        assert_eq!(before.value(p).data(), m.params().value(p).data());
    }
}

#[test]
fn active_search_best_is_monotone_in_epochs() {
    let inst = tsp(8, 17);
    let m = model(ProblemKind::Tsp, 17);
    let mut prev = f64::INFINITY;
    for epochs in 1..5 {
        let cfg = ActiveSearchConfig { batch: 8, epochs, learning_rate: 1e-2, seed: 1, ..Default::default() };
        let r = active_search(&inst, &m, &cfg).unwrap();
        assert!(r.best_length <= prev + 1e-12);
        prev = r.best_length;
    }
}

#[test]
fn strategy_names_round_trip() {
    for s in Strategy::ALL {
        assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
    }
    assert!("dfs".parse::<Strategy>().is_err());
}

