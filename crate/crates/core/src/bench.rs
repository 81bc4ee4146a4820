//! Controller micro-benchmarks: flow-distribution solves and instance
//! placements over synthetic tenants.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::flowdist::{solve_flow_distribution, BandwidthModel, NetworkView};
use crate::provisioning::{Policy, World};
use crate::scenario::{ChainEntry, InstanceEntry, MBoxEntry, Scenario, WorkloadPoint};
use crate::sim::{build_world, SimError};
use crate::topology::TopologySpec;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub tenants: usize,
    pub solves: usize,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
    pub solves_per_s: f64,
    pub placements: usize,
    pub mean_place_ms: f64,
    pub placements_per_s: f64,
    pub trivial_solve_ms: f64,
}

impl BenchReport {
    pub fn table(&self) -> String {
        format!(
            "operation          count  mean_ms  ops_per_s\n\
             flow_distribution  {:>5}  {:>7.3}  {:>9.1}\n\
             placement          {:>5}  {:>7.3}  {:>9.1}\n\
             trivial_tenant         1  {:>7.3}\n\
             max flow_distribution latency {:.3} ms over {} tenants\n",
            self.solves,
            self.mean_solve_ms,
            self.solves_per_s,
            self.placements,
            self.mean_place_ms,
            self.placements_per_s,
            self.trivial_solve_ms,
            self.max_solve_ms,
            self.tenants
        )
    }
}

fn mbox(name: &str, cap: f64) -> MBoxEntry {
    MBoxEntry { name: name.into(), capacity_mbps: cap, gain: 1.0, mangling: false, polling: false }
}

fn chain(id: &str, elements: &[&str]) -> ChainEntry {
    ChainEntry {
        id: id.into(),
        source: "gen".into(),
        elements: elements.iter().map(|s| s.to_string()).collect(),
        sink: "srv".into(),
    }
}

fn inst(element: &str, count: usize, rack: Option<usize>) -> InstanceEntry {
    InstanceEntry { element: element.into(), count, rack, machine: None }
}

fn base(name: String, seed: u64, topology: TopologySpec) -> Scenario {
    Scenario {
        name,
        seed,
        duration_s: 1.0,
        tick_s: 1.0,
        policy: Policy::Stratos,
        topology,
        sim: Default::default(),
        provisioning: Default::default(),
        scripted_scaling: None,
        mboxes: Vec::new(),
        endpoints: Vec::new(),
        chains: Vec::new(),
        instances: Vec::new(),
        workload: Vec::new(),
        background: Vec::new(),
    }
}

/// A tenant of three chains over three middleboxes, eight instances in all.
pub fn synthetic_tenant(k: usize, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e37_79b9));
    let mut s = base(format!("tenant{k}"), seed, TopologySpec::new(20, 1, 8).with_fanouts(4, 5));
    s.mboxes = vec![mbox("A", 100.0), mbox("B", 80.0), mbox("C", 120.0)];
    s.chains = vec![chain("c0", &["A", "B"]), chain("c1", &["A", "C"]), chain("c2", &["B", "C"])];
    for (e, n) in [("gen", 1), ("A", 2), ("B", 2), ("C", 2), ("srv", 1)] {
        s.instances.push(inst(e, n, None));
    }
    for c in &s.chains {
        let mbps = rng.gen_range(20.0..60.0);
        s.workload.push(WorkloadPoint { time_s: 0.0, chain: c.id.clone(), mbps: (mbps * 10.0f64).round() / 10.0 });
    }
    s
}

/// One chain through one middlebox instance.
pub fn trivial_tenant() -> Scenario {
    let mut s = base("trivial".into(), 0, TopologySpec::new(1, 1, 4));
    s.mboxes = vec![mbox("fw", 100.0)];
    s.chains = vec![chain("c", &["fw"])];
    for e in ["gen", "fw", "srv"] {
        s.instances.push(inst(e, 1, Some(0)));
    }
    s.workload.push(WorkloadPoint { time_s: 0.0, chain: "c".into(), mbps: 10.0 });
    s
}

fn time_solve(w: &World) -> Result<f64, SimError> {
    let chains = w.stages(0.0);
    let avail = w.controller_available();
    let net = NetworkView { topology: &w.topology, placement: &w.placement, available: &avail, model: BandwidthModel::RackPair };
    let t = Instant::now();
    solve_flow_distribution(&chains, &net, w.config.epsilon)?;
    Ok(t.elapsed().as_secs_f64() * 1e3)
}

/// Time one flow-distribution solve and one horizontal-scaling placement
/// per tenant, single-threaded.
pub fn bench_controller(tenants: usize, seed: u64) -> Result<BenchReport, SimError> {
    let mut worlds = Vec::with_capacity(tenants);
    for k in 0..tenants {
        worlds.push(build_world(&synthetic_tenant(k, seed), Policy::Stratos, seed.wrapping_add(k as u64))?.0);
    }
    let mut solve_ms = Vec::with_capacity(tenants);
    let t0 = Instant::now();
    for w in &worlds {
        solve_ms.push(time_solve(w)?);
    }
    let solve_total = t0.elapsed().as_secs_f64();

    let names = ["A", "B", "C"];
    let t1 = Instant::now();
    for (k, w) in worlds.iter_mut().enumerate() {
        w.horizontal_scale(names[k % names.len()], 0.0)?;
    }
    let place_total = t1.elapsed().as_secs_f64();

    let trivial = build_world(&trivial_tenant(), Policy::Stratos, 0)?.0;
    // Best of a few runs to keep one-off scheduler noise out of the floor.
    let mut trivial_ms = f64::INFINITY;
    for _ in 0..5 {
        trivial_ms = trivial_ms.min(time_solve(&trivial)?);
    }

    let n = tenants.max(1) as f64;
    Ok(BenchReport {
        tenants,
        solves: tenants,
        mean_solve_ms: solve_ms.iter().sum::<f64>() / n,
        max_solve_ms: solve_ms.iter().copied().fold(0.0, f64::max),
        solves_per_s: tenants as f64 / solve_total.max(1e-9),
        placements: tenants,
        mean_place_ms: place_total * 1e3 / n,
        placements_per_s: tenants as f64 / place_total.max(1e-9),
        trivial_solve_ms: trivial_ms,
    })
}
