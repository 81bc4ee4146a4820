//! The footprint LP against an independent constraint checker and a
//! brute-force grid search, plus the max-throughput variant's properties.

mod common;

use std::collections::BTreeMap;

use chainorch::flowdist::{
    derive_path_weights, solve_flow_distribution, solve_max_throughput, uniform_distribution, FlowError, ThroughputOptions,
};
use chainorch::topology::{InstanceId, MachineId};
use common::{check_all, grid_search, random_case, Case};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GRID_BUDGET: u64 = 60_000;

#[test]
fn lp_matches_grid_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (mut solved, mut infeasible, mut shared, mut compared) = (0, 0, 0, 0);
    let mut attempts = 0;
    while solved < 60 && attempts < 400 {
        attempts += 1;
        let case = random_case(&mut rng, GRID_BUDGET);
        match solve_flow_distribution(&case.chains, &case.net(), case.epsilon) {
            Ok(d) => {
                check_all(&case, &d, 1e-6).unwrap_or_else(|e| panic!("case {attempts}: {e}"));
                let eps_of = |i: InstanceId| d.widened.get(&i).copied().unwrap_or(case.epsilon);
                let (best, _) = grid_search(&case, &eps_of);
                if let Some(b) = best {
                    compared += 1;
                    assert!(d.objective <= b + 1e-6 * b.max(1.0), "case {attempts}: LP {} > grid {b}", d.objective);
                }
                if !d.widened.is_empty() {
                    shared += 1;
                }
                solved += 1;
            }
            Err(FlowError::Infeasible { .. }) => {
                // Any feasible grid point would contradict the solver.
                let (best, n) = grid_search(&case, &|_| case.epsilon);
                assert!(best.is_none(), "case {attempts}: solver infeasible but {n} grid points feasible");
                infeasible += 1;
            }
            Err(e) => panic!("case {attempts}: {e}"),
        }
    }
    assert!(solved >= 50, "only {solved} solved instances ({infeasible} infeasible)");
    assert!(compared >= 25, "grid found feasible points in only {compared} cases");
    eprintln!("{solved} solved ({compared} with feasible grid points), {infeasible} infeasible, {shared} widened");
}

#[test]
fn lp_objective_bounded_by_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut compared = 0;
    for _ in 0..300 {
        let case = random_case(&mut rng, u64::MAX);
        let u = uniform_distribution(&case.chains, &case.net()).unwrap();
        // Uniform meets gain, demand and balance rows by construction; only bandwidth can fail.
        if common::check_bandwidth(&case, &u.edges, 1e-9).is_err() {
            continue;
        }
        let d = solve_flow_distribution(&case.chains, &case.net(), case.epsilon).unwrap();
        assert!(d.objective <= u.objective + 1e-6 * u.objective.max(1.0));
        compared += 1;
    }
    assert!(compared >= 50, "{compared}");
}

fn scaled(case: &Case, k: f64) -> Case {
    let mut chains = case.chains.clone();
    for c in &mut chains {
        c.demand *= k;
    }
    Case {
        topo: case.topo.clone(),
        placement: case.placement.clone(),
        chains,
        available: case.available.iter().map(|a| a * k).collect(),
        model: case.model,
        epsilon: case.epsilon,
    }
}

fn serving_caps(case: &Case, cap: f64) -> BTreeMap<InstanceId, f64> {
    let mut caps = BTreeMap::new();
    for c in &case.chains {
        for s in &c.stages[1..c.stages.len() - 1] {
            for &i in s {
                caps.insert(i, cap);
            }
        }
    }
    caps
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scale_invariance(seed in any::<u64>(), k in prop::sample::select(vec![0.25, 0.5, 2.0, 4.0, 8.0])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = random_case(&mut rng, u64::MAX);
        let base = solve_flow_distribution(&case.chains, &case.net(), case.epsilon);
        let big = scaled(&case, k);
        let other = solve_flow_distribution(&big.chains, &big.net(), big.epsilon);
        match (base, other) {
            (Ok(a), Ok(b)) => {
                for (key, v) in &a.edges {
                    let w = b.edges[key];
                    prop_assert!((w - k * v).abs() <= 1e-6 * (k * v).abs().max(1.0), "{key:?}: {w} vs {}", k * v);
                }
                for (c, cb) in case.chains.iter().zip(&big.chains) {
                    let pa = derive_path_weights(&a, c, 0, c.stages.len() - 1);
                    let pb = derive_path_weights(&b, cb, 0, cb.stages.len() - 1);
                    for (x, y) in pa.iter().zip(&pb) {
                        prop_assert_eq!(&x.instances, &y.instances);
                        prop_assert!((x.weight - y.weight).abs() <= 1e-9);
                    }
                }
            }
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "feasibility changed under scaling: {:?} vs {:?}", a.is_ok(), b.is_ok()),
        }
    }

    #[test]
    fn gamma_conservation_is_tight(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = random_case(&mut rng, u64::MAX);
        if let Ok(d) = solve_flow_distribution(&case.chains, &case.net(), case.epsilon) {
            prop_assert!(common::check_conservation(&case, &d.edges, 1e-9).is_ok());
        }
    }

    #[test]
    fn max_throughput_respects_bounds(seed in any::<u64>(), cap in 5.0..80.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = random_case(&mut rng, u64::MAX);
        let caps = serving_caps(&case, cap);
        let d = solve_max_throughput(&case.chains, &case.net(), &ThroughputOptions { capacity: Some(&caps), envelope: None }).unwrap();
        prop_assert!(common::check_conservation(&case, &d.edges, 1e-6).is_ok());
        prop_assert!(common::check_bandwidth(&case, &d.edges, 1e-6).is_ok());
        let loads = d.instance_loads(&case.chains);
        for (i, c) in &caps {
            prop_assert!(loads.get(i).copied().unwrap_or(0.0) <= c + 1e-6);
        }
        for c in &case.chains {
            prop_assert!(d.served[&c.id] <= c.demand + 1e-6);
        }
    }

    #[test]
    fn adding_an_instance_never_reduces_served(seed in any::<u64>(), cap in 5.0..80.0f64, rack in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut case = random_case(&mut rng, u64::MAX);
        let mut caps = serving_caps(&case, cap);
        let before = solve_max_throughput(&case.chains, &case.net(), &ThroughputOptions { capacity: Some(&caps), envelope: None }).unwrap();
        let extra = InstanceId(1000);
        case.placement.place(extra, MachineId(rack)).unwrap();
        let c0 = &mut case.chains[0];
        let pos = 1 + (seed as usize) % (c0.stages.len() - 2);
        c0.stages[pos].push(extra);
        caps.insert(extra, cap);
        let after = solve_max_throughput(&case.chains, &case.net(), &ThroughputOptions { capacity: Some(&caps), envelope: None }).unwrap();
        let total = |d: &chainorch::flowdist::FlowDistribution| d.served.values().sum::<f64>();
        prop_assert!(total(&after) >= total(&before) - 1e-6, "{} < {}", total(&after), total(&before));
    }
}
