//! Random small flow-distribution instances and an independent checker
//! for the footprint LP's constraint families.

#![allow(dead_code)]

use std::collections::BTreeMap;

use chainorch::chain::ChainId;
use chainorch::flowdist::{BandwidthModel, ChainStages, EdgeKey, FlowDistribution, NetworkView};
use chainorch::topology::{build_tree_topology, DataCenterTopology, InstanceId, MachineId, Placement, RackId, TopologySpec};
use rand::seq::SliceRandom;
use rand::Rng;

pub struct Case {
    pub topo: DataCenterTopology,
    pub placement: Placement,
    pub chains: Vec<ChainStages>,
    pub available: Vec<f64>,
    pub model: BandwidthModel,
    pub epsilon: f64,
}

impl Case {
    pub fn net(&self) -> NetworkView<'_> {
        NetworkView { topology: &self.topo, placement: &self.placement, available: &self.available, model: self.model }
    }

    pub fn rack(&self, i: InstanceId) -> RackId {
        self.placement.rack(&self.topo, i).expect("placed")
    }
}

fn combos(n: usize) -> u64 {
    // Compositions of 20 grid steps into n parts.
    let (mut num, mut den) = (1u64, 1u64);
    for k in 1..n as u64 {
        num *= 20 + k;
        den *= k;
    }
    num / den
}

/// Number of points the 5% grid search visits.
pub fn grid_size(chains: &[ChainStages]) -> u64 {
    let mut total = 1u64;
    for c in chains {
        for j in 0..c.stages.len() - 1 {
            for _ in &c.stages[j] {
                total = total.saturating_mul(combos(c.stages[j + 1].len()));
            }
        }
    }
    total
}

/// ≤ 3 chains, ≤ 3 instances per position, over a 4-rack tree. Middle
/// instances are sometimes shared between chains.
pub fn random_case(rng: &mut impl Rng, max_grid: u64) -> Case {
    loop {
        let topo = build_tree_topology(&TopologySpec::new(4, 1, 32).with_fanouts(2, 2)).unwrap();
        let mut placement = Placement::new(&topo);
        let mut next = 0u32;
        let mut new_inst = |placement: &mut Placement, rng: &mut dyn rand::RngCore| {
            let id = InstanceId(next);
            next += 1;
            let m = MachineId(rng.gen_range(0..topo.machines.len()));
            placement.place(id, m).unwrap();
            id
        };
        let n_chains = rng.gen_range(1..=3);
        let mut pool: Vec<InstanceId> = Vec::new();
        let mut chains = Vec::new();
        for c in 0..n_chains {
            let mids = rng.gen_range(1..=2);
            let mut stages = vec![vec![new_inst(&mut placement, rng)]];
            let mut gains = vec![1.0];
            for _ in 0..mids {
                let n = rng.gen_range(1..=3);
                let mut s = Vec::new();
                for _ in 0..n {
                    if !pool.is_empty() && rng.gen_bool(0.25) {
                        let i = *pool.choose(rng).unwrap();
                        if !s.contains(&i) && !stages.iter().any(|st: &Vec<InstanceId>| st.contains(&i)) {
                            s.push(i);
                            continue;
                        }
                    }
                    let i = new_inst(&mut placement, rng);
                    pool.push(i);
                    s.push(i);
                }
                stages.push(s);
                gains.push(*[1.0, 1.0, 0.5, 2.0].choose(rng).unwrap());
            }
            stages.push(vec![new_inst(&mut placement, rng)]);
            gains.push(1.0);
            let demand = (rng.gen_range(10.0..100.0f64) * 4.0).round() / 4.0;
            chains.push(ChainStages { id: ChainId(format!("c{c}")), stages, gains, demand });
        }
        if grid_size(&chains) > max_grid {
            continue;
        }
        let available = topo.links.iter().map(|_| rng.gen_range(20.0..400.0f64).round()).collect();
        let model = if rng.gen_bool(0.5) { BandwidthModel::RackPair } else { BandwidthModel::Link };
        let epsilon = *[0.10, 0.15, 0.20].choose(rng).unwrap();
        return Case { topo, placement, chains, available, model, epsilon };
    }
}

pub fn flow(edges: &BTreeMap<EdgeKey, f64>, c: &ChainId, j: usize, i: InstanceId, i2: InstanceId) -> f64 {
    edges.get(&EdgeKey { chain: c.clone(), stage: j, from: i, to: i2 }).copied().unwrap_or(0.0)
}

fn inflow(edges: &BTreeMap<EdgeKey, f64>, c: &ChainStages, j: usize, i: InstanceId) -> f64 {
    c.stages[j - 1].iter().map(|&p| flow(edges, &c.id, j - 1, p, i)).sum()
}

fn outflow(edges: &BTreeMap<EdgeKey, f64>, c: &ChainStages, j: usize, i: InstanceId) -> f64 {
    c.stages[j + 1].iter().map(|&n| flow(edges, &c.id, j, i, n)).sum()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Inter-rack volume, recomputed from racks.
pub fn objective(case: &Case, edges: &BTreeMap<EdgeKey, f64>) -> f64 {
    edges.iter().filter(|(k, _)| case.rack(k.from) != case.rack(k.to)).map(|(_, v)| v).sum()
}

/// Gain: inflow = γ·outflow at every middle instance.
pub fn check_conservation(case: &Case, edges: &BTreeMap<EdgeKey, f64>, tol: f64) -> Result<(), String> {
    for c in &case.chains {
        for j in 1..c.stages.len() - 1 {
            for &i in &c.stages[j] {
                let (a, b) = (inflow(edges, c, j, i), c.gains[j] * outflow(edges, c, j, i));
                if !close(a, b, tol) {
                    return Err(format!("gain {} j={j} {i}: in {a} vs γ·out {b}", c.id));
                }
            }
        }
    }
    Ok(())
}

/// Demand: the source emits the full demand.
pub fn check_coverage(case: &Case, edges: &BTreeMap<EdgeKey, f64>, tol: f64) -> Result<(), String> {
    for c in &case.chains {
        let out: f64 = c.stages[0].iter().map(|&i| outflow(edges, c, 0, i)).sum();
        if !close(out, c.demand, tol) {
            return Err(format!("demand {}: {out} vs {}", c.id, c.demand));
        }
    }
    Ok(())
}

/// Bandwidth under the case's bandwidth model.
pub fn check_bandwidth(case: &Case, edges: &BTreeMap<EdgeKey, f64>, tol: f64) -> Result<(), String> {
    let mut rows: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for (k, &v) in edges {
        let (a, b) = (case.rack(k.from), case.rack(k.to));
        match case.model {
            BandwidthModel::RackPair => {
                if a == b {
                    continue;
                }
                let cap = case.topo.routing(a, b).iter().map(|l| case.available[l.0]).fold(f64::INFINITY, f64::min);
                let e = rows.entry(format!("{}-{}", a.min(b), a.max(b))).or_insert((0.0, cap));
                e.0 += v;
            }
            BandwidthModel::Link => {
                let (m, m2) = (case.placement.machine(k.from).unwrap(), case.placement.machine(k.to).unwrap());
                for l in case.topo.machine_path(m, m2) {
                    let e = rows.entry(format!("link{}", l.0)).or_insert((0.0, case.available[l.0]));
                    e.0 += v;
                }
            }
        }
    }
    for (name, (load, cap)) in rows {
        if load > cap + tol * cap.max(1.0) {
            return Err(format!("bandwidth {name}: {load} > {cap}"));
        }
    }
    Ok(())
}

/// Load balance with per-instance leeway.
pub fn check_load_balance(
    case: &Case,
    edges: &BTreeMap<EdgeKey, f64>,
    eps_of: &dyn Fn(InstanceId) -> f64,
    tol: f64,
) -> Result<(), String> {
    let mut terms: BTreeMap<InstanceId, (f64, f64)> = BTreeMap::new();
    for c in &case.chains {
        for j in 1..c.stages.len() - 1 {
            let vol = c.gains[1..j].iter().fold(c.demand, |acc, g| acc / g);
            for &i in &c.stages[j] {
                let e = terms.entry(i).or_default();
                e.0 += inflow(edges, c, j, i);
                e.1 += vol / c.stages[j].len() as f64;
            }
        }
    }
    for (i, (load, target)) in terms {
        let eps = eps_of(i);
        let (lo, hi) = ((1.0 - eps) * target, (1.0 + eps) * target);
        let slack = tol * target.max(1.0);
        if load < lo - slack || load > hi + slack {
            return Err(format!("balance {i}: {load} outside [{lo}, {hi}]"));
        }
    }
    Ok(())
}

pub fn check_all(case: &Case, d: &FlowDistribution, tol: f64) -> Result<(), String> {
    if let Some((k, v)) = d.edges.iter().find(|(_, v)| **v < -tol) {
        return Err(format!("negative flow {v} on {k:?}"));
    }
    let eps_of = |i: InstanceId| d.widened.get(&i).copied().unwrap_or(case.epsilon);
    check_conservation(case, &d.edges, tol)?;
    check_coverage(case, &d.edges, tol)?;
    check_bandwidth(case, &d.edges, tol)?;
    check_load_balance(case, &d.edges, &eps_of, tol)?;
    let obj = objective(case, &d.edges);
    if !close(obj, d.objective, tol) {
        return Err(format!("reported objective {} vs recomputed {obj}", d.objective));
    }
    Ok(())
}

/// Every split of `total` into `n` parts on a 5% grid.
fn grid_splits(n: usize) -> Vec<Vec<f64>> {
    fn rec(n: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<f64>>) {
        if n == 1 {
            cur.push(left);
            out.push(cur.iter().map(|&k| k as f64 / 20.0).collect());
            cur.pop();
            return;
        }
        for k in 0..=left {
            cur.push(k);
            rec(n - 1, left - k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, 20, &mut Vec::new(), &mut out);
    out
}

/// Smallest objective over feasible 5%-grid splits, and how many grid
/// points were feasible. Each instance splits its outflow over the next
/// position; γ fixes outflow from inflow.
pub fn grid_search(case: &Case, eps_of: &dyn Fn(InstanceId) -> f64) -> (Option<f64>, u64) {
    // Decision points in order: (chain, stage, instance).
    let mut points = Vec::new();
    for (ci, c) in case.chains.iter().enumerate() {
        for j in 0..c.stages.len() - 1 {
            for &i in &c.stages[j] {
                points.push((ci, j, i));
            }
        }
    }
    let splits: Vec<Vec<Vec<f64>>> =
        points.iter().map(|&(ci, j, _)| grid_splits(case.chains[ci].stages[j + 1].len())).collect();

    let mut best: Option<f64> = None;
    let mut feasible = 0u64;
    let mut choice = vec![0usize; points.len()];
    loop {
        let mut edges: BTreeMap<EdgeKey, f64> = BTreeMap::new();
        for (p, &(ci, j, i)) in points.iter().enumerate() {
            let c = &case.chains[ci];
            let out = if j == 0 { c.demand / c.stages[0].len() as f64 } else { inflow(&edges, c, j, i) / c.gains[j] };
            for (k, &n) in c.stages[j + 1].iter().enumerate() {
                edges.insert(EdgeKey { chain: c.id.clone(), stage: j, from: i, to: n }, out * splits[p][choice[p]][k]);
            }
        }
        if check_bandwidth(case, &edges, 1e-9).is_ok() && check_load_balance(case, &edges, eps_of, 1e-9).is_ok() {
            feasible += 1;
            let obj = objective(case, &edges);
            best = Some(best.map_or(obj, |b: f64| b.min(obj)));
        }
        // Odometer over the decision points.
        let mut p = 0;
        loop {
            if p == points.len() {
                return (best, feasible);
            }
            choice[p] += 1;
            if choice[p] < splits[p].len() {
                break;
            }
            choice[p] = 0;
            p += 1;
        }
    }
}
