//! Flow distribution: the footprint-minimizing LP, the max-throughput variant
//! the simulator uses to compute served demand, path-weight derivation and
//! the uniform baseline.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::ChainId;
use crate::lp::{Cmp, LinearProgram, LpError};
use crate::topology::{DataCenterTopology, InstanceId, LinkId, Placement, RackId, TopologyError};

pub const DEFAULT_EPSILON: f64 = 0.15;
/// Leeway widening for instances shared by several chains.
pub const WIDEN_STEP: f64 = 0.05;
pub const WIDEN_MAX: f64 = 0.35;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("chain {chain} has no instances at position {stage}")]
    EmptyStage { chain: ChainId, stage: usize },
    #[error("chain {0}: stage and gain vectors disagree or fewer than two stages")]
    Malformed(ChainId),
    #[error("infeasible: {family:?} constraints bind ({rows:?})")]
    Infeasible { family: ConstraintFamily, rows: Vec<String> },
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintFamily {
    Bandwidth,
    LoadBalance,
}

/// How bandwidth rows are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthModel {
    /// One row per unordered rack pair bounded by b(r, r′).
    #[default]
    RackPair,
    /// One row per physical link bounded by that link's residual capacity.
    Link,
}

/// One chain as seen by the solver: stage 0 holds source endpoint instances,
/// the last stage sink endpoint instances, the rest middlebox instances.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainStages {
    pub id: ChainId,
    pub stages: Vec<Vec<InstanceId>>,
    /// γ per stage (ingress / egress); endpoints use 1.
    pub gains: Vec<f64>,
    pub demand: f64,
}

impl ChainStages {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.stages.len() < 2 || self.gains.len() != self.stages.len() {
            return Err(FlowError::Malformed(self.id.clone()));
        }
        for (j, s) in self.stages.iter().enumerate() {
            if s.is_empty() {
                return Err(FlowError::EmptyStage { chain: self.id.clone(), stage: j });
            }
        }
        Ok(())
    }

    /// Volume entering stage `j` when the chain carries `v` at its source.
    pub fn stage_volume(&self, j: usize, v: f64) -> f64 {
        self.gains[1..j.max(1)].iter().fold(v, |acc, g| acc / g)
    }

    pub fn is_middle(&self, j: usize) -> bool {
        j > 0 && j + 1 < self.stages.len()
    }
}

/// Snapshot of the network a solve runs against.
#[derive(Debug, Clone, Copy)]
pub struct NetworkView<'a> {
    pub topology: &'a DataCenterTopology,
    pub placement: &'a Placement,
    /// Residual capacity per link, indexed by link id.
    pub available: &'a [f64],
    pub model: BandwidthModel,
}

impl<'a> NetworkView<'a> {
    pub fn rack(&self, i: InstanceId) -> Result<RackId, FlowError> {
        self.placement
            .rack(self.topology, i)
            .ok_or(FlowError::Topology(TopologyError::MissingPlacement(i)))
    }

    pub fn b(&self, r: RackId, r2: RackId) -> f64 {
        self.topology.routing(r, r2).iter().map(|l| self.available[l.0]).fold(f64::INFINITY, f64::min)
    }

    fn path(&self, i: InstanceId, i2: InstanceId) -> Result<Vec<LinkId>, FlowError> {
        Ok(self.topology.virtual_link_path(self.placement, i, i2)?)
    }
}

/// Binary rack-distance cost between instances.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CostMatrix {
    pub cost: BTreeMap<(InstanceId, InstanceId), f64>,
}

impl CostMatrix {
    pub fn get(&self, i: InstanceId, i2: InstanceId) -> f64 {
        self.cost.get(&(i, i2)).copied().unwrap_or(0.0)
    }
}

pub fn build_cost_matrix(
    instances: &[InstanceId],
    placement: &Placement,
    topology: &DataCenterTopology,
) -> Result<CostMatrix, FlowError> {
    let mut racks = Vec::with_capacity(instances.len());
    for &i in instances {
        racks.push(placement.rack(topology, i).ok_or(TopologyError::MissingPlacement(i))?);
    }
    let mut cost = BTreeMap::new();
    for (a, &i) in instances.iter().enumerate() {
        for (b, &i2) in instances.iter().enumerate() {
            cost.insert((i, i2), if racks[a] != racks[b] { 1.0 } else { 0.0 });
        }
    }
    Ok(CostMatrix { cost })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeKey {
    pub chain: ChainId,
    /// Edge from stage `stage` to stage `stage + 1`.
    pub stage: usize,
    pub from: InstanceId,
    pub to: InstanceId,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowDistribution {
    pub edges: BTreeMap<EdgeKey, f64>,
    /// Network footprint of `edges`.
    pub objective: f64,
    /// Source volume actually carried per chain.
    pub served: BTreeMap<ChainId, f64>,
    /// Instances whose load-balance band had to be widened, with the leeway used.
    pub widened: BTreeMap<InstanceId, f64>,
}

impl FlowDistribution {
    pub fn flow(&self, chain: &ChainId, stage: usize, from: InstanceId, to: InstanceId) -> f64 {
        self.edges
            .get(&EdgeKey { chain: chain.clone(), stage, from, to })
            .copied()
            .unwrap_or(0.0)
    }

    /// Volume entering `i` on chain `c` (source volume for stage-0 instances).
    pub fn inflow(&self, c: &ChainStages, j: usize, i: InstanceId) -> f64 {
        if j == 0 {
            return self.outflow(c, 0, i);
        }
        c.stages[j - 1].iter().map(|&p| self.flow(&c.id, j - 1, p, i)).sum()
    }

    pub fn outflow(&self, c: &ChainStages, j: usize, i: InstanceId) -> f64 {
        if j + 1 >= c.stages.len() {
            return 0.0;
        }
        c.stages[j + 1].iter().map(|&n| self.flow(&c.id, j, i, n)).sum()
    }

    /// Total volume processed by each instance across all chains.
    pub fn instance_loads(&self, chains: &[ChainStages]) -> BTreeMap<InstanceId, f64> {
        let mut loads = BTreeMap::new();
        for c in chains {
            for (j, s) in c.stages.iter().enumerate() {
                for &i in s {
                    *loads.entry(i).or_insert(0.0) += self.inflow(c, j, i);
                }
            }
        }
        loads
    }

    /// Inter-rack volume carried for one chain (sum over edges whose ends differ in rack).
    pub fn inter_rack_volume(&self, chain: &ChainId, net: &NetworkView<'_>) -> f64 {
        self.edges
            .iter()
            .filter(|(k, _)| &k.chain == chain)
            .filter(|(k, _)| match (net.rack(k.from), net.rack(k.to)) {
                (Ok(a), Ok(b)) => a != b,
                _ => false,
            })
            .map(|(_, v)| v)
            .sum()
    }

    /// (link path, volume) pairs for applying this distribution to link loads.
    pub fn link_traffic(&self, net: &NetworkView<'_>) -> Result<Vec<(Vec<LinkId>, f64)>, FlowError> {
        let mut out = Vec::new();
        for (k, &v) in &self.edges {
            if v > 0.0 {
                out.push((net.path(k.from, k.to)?, v));
            }
        }
        Ok(out)
    }
}

/// Footprint of a set of edge flows.
pub fn footprint(edges: &BTreeMap<EdgeKey, f64>, net: &NetworkView<'_>) -> Result<f64, FlowError> {
    let mut total = 0.0;
    for (k, v) in edges {
        if net.rack(k.from)? != net.rack(k.to)? {
            total += v;
        }
    }
    Ok(total)
}

/// Shared builder state for both LP variants.
struct Builder<'a, 'n> {
    lp: LinearProgram,
    keys: Vec<EdgeKey>,
    /// Upper bound on each edge variable, used to prune redundant rows.
    ub: Vec<f64>,
    chains: &'a [ChainStages],
    net: &'a NetworkView<'n>,
    /// Variable index per (chain index, stage, from, to).
    index: BTreeMap<(usize, usize, InstanceId, InstanceId), usize>,
}

impl<'a, 'n> Builder<'a, 'n> {
    fn new(chains: &'a [ChainStages], net: &'a NetworkView<'n>, footprint_weight: f64) -> Result<Self, FlowError> {
        let mut b = Builder {
            lp: LinearProgram::new(),
            keys: Vec::new(),
            ub: Vec::new(),
            chains,
            net,
            index: BTreeMap::new(),
        };
        let mut racks = BTreeMap::new();
        for c in chains {
            c.validate()?;
            for s in &c.stages {
                for &i in s {
                    racks.insert(i, net.rack(i)?);
                }
            }
        }
        for (ci, c) in chains.iter().enumerate() {
            for j in 0..c.stages.len() - 1 {
                let vol = c.stage_volume(j + 1, c.demand);
                for &i in &c.stages[j] {
                    for &i2 in &c.stages[j + 1] {
                        let cost = if racks[&i] != racks[&i2] { footprint_weight } else { 0.0 };
                        let v = b.lp.add_var(format!("f({},{},{}->{})", c.id, j, i, i2), cost);
                        b.index.insert((ci, j, i, i2), v);
                        b.keys.push(EdgeKey { chain: c.id.clone(), stage: j, from: i, to: i2 });
                        b.ub.push(vol);
                    }
                }
            }
        }
        Ok(b)
    }

    fn var(&self, ci: usize, j: usize, i: InstanceId, i2: InstanceId) -> usize {
        self.index[&(ci, j, i, i2)]
    }

    fn in_vars(&self, ci: usize, j: usize, i: InstanceId) -> Vec<usize> {
        self.chains[ci].stages[j - 1].iter().map(|&p| self.var(ci, j - 1, p, i)).collect()
    }

    fn out_vars(&self, ci: usize, j: usize, i: InstanceId) -> Vec<usize> {
        self.chains[ci].stages[j + 1].iter().map(|&n| self.var(ci, j, i, n)).collect()
    }

    /// Gain rows: inflow = outflow × γ at every middlebox instance.
    fn conservation(&mut self) {
        for (ci, c) in self.chains.iter().enumerate() {
            for j in 1..c.stages.len() - 1 {
                for &i in &c.stages[j] {
                    let mut coefs: Vec<(usize, f64)> = self.in_vars(ci, j, i).into_iter().map(|v| (v, 1.0)).collect();
                    coefs.extend(self.out_vars(ci, j, i).into_iter().map(|v| (v, -c.gains[j])));
                    self.lp.add_row(format!("gain[{},{},{}]", c.id, j, i), coefs, Cmp::Eq, 0.0);
                }
            }
        }
    }

    /// Source volume terms for chain `ci`.
    fn source_vars(&self, ci: usize) -> Vec<(usize, f64)> {
        let c = &self.chains[ci];
        c.stages[0].iter().flat_map(|&i| self.out_vars(ci, 0, i)).map(|v| (v, 1.0)).collect()
    }

    /// Bandwidth rows under the configured bandwidth model.
    fn bandwidth(&mut self) -> Result<(), FlowError> {
        match self.net.model {
            BandwidthModel::RackPair => {
                let mut pairs: BTreeMap<(RackId, RackId), Vec<usize>> = BTreeMap::new();
                for (v, k) in self.keys.iter().enumerate() {
                    let (a, b) = (self.net.rack(k.from)?, self.net.rack(k.to)?);
                    if a != b {
                        pairs.entry((a.min(b), a.max(b))).or_default().push(v);
                    }
                }
                for ((a, b), vars) in pairs {
                    let cap = self.net.b(a, b);
                    let bound: f64 = vars.iter().map(|&v| self.ub[v]).sum();
                    if cap.is_finite() && bound > cap {
                        let coefs = vars.into_iter().map(|v| (v, 1.0)).collect();
                        self.lp.add_row(format!("bw[{a},{b}]"), coefs, Cmp::Le, cap.max(0.0));
                    }
                }
            }
            BandwidthModel::Link => {
                let mut per_link: BTreeMap<LinkId, Vec<usize>> = BTreeMap::new();
                for (v, k) in self.keys.iter().enumerate() {
                    for l in self.net.path(k.from, k.to)? {
                        per_link.entry(l).or_default().push(v);
                    }
                }
                for (l, vars) in per_link {
                    let cap = self.net.available[l.0];
                    let bound: f64 = vars.iter().map(|&v| self.ub[v]).sum();
                    if bound > cap {
                        let coefs = vars.into_iter().map(|v| (v, 1.0)).collect();
                        self.lp.add_row(format!("bw[{l}]"), coefs, Cmp::Le, cap.max(0.0));
                    }
                }
            }
        }
        Ok(())
    }

    /// Load balance rows; `eps_for` gives the leeway per instance.
    fn load_balance(&mut self, eps_for: &dyn Fn(InstanceId) -> f64) {
        let mut terms: BTreeMap<InstanceId, (Vec<usize>, f64)> = BTreeMap::new();
        for (ci, c) in self.chains.iter().enumerate() {
            for j in 1..c.stages.len() - 1 {
                let share = c.stage_volume(j, c.demand) / c.stages[j].len() as f64;
                for &i in &c.stages[j] {
                    let e = terms.entry(i).or_default();
                    e.0.extend(self.in_vars(ci, j, i));
                    e.1 += share;
                }
            }
        }
        for (i, (vars, target)) in terms {
            let eps = eps_for(i);
            let coefs: Vec<(usize, f64)> = vars.into_iter().map(|v| (v, 1.0)).collect();
            self.lp.add_row(format!("balance[{i}].lo"), coefs.clone(), Cmp::Ge, (1.0 - eps) * target);
            self.lp.add_row(format!("balance[{i}].hi"), coefs, Cmp::Le, (1.0 + eps) * target);
        }
    }

    fn distribution(&self, x: &[f64]) -> BTreeMap<EdgeKey, f64> {
        self.keys
            .iter()
            .enumerate()
            .map(|(v, k)| (k.clone(), if x[v] > 1e-12 { x[v] } else { 0.0 }))
            .collect()
    }
}

/// Instances that serve more than one chain.
pub fn shared_instances(chains: &[ChainStages]) -> BTreeSet<InstanceId> {
    let mut seen: BTreeMap<InstanceId, usize> = BTreeMap::new();
    for c in chains {
        let mut mine = BTreeSet::new();
        for s in &c.stages[1..c.stages.len().saturating_sub(1)] {
            mine.extend(s.iter().copied());
        }
        for i in mine {
            *seen.entry(i).or_default() += 1;
        }
    }
    seen.into_iter().filter(|(_, n)| *n > 1).map(|(i, _)| i).collect()
}

fn build_footprint_lp(
    chains: &[ChainStages],
    net: &NetworkView<'_>,
    eps_for: &dyn Fn(InstanceId) -> f64,
    with_bandwidth: bool,
) -> Result<(LinearProgram, Vec<EdgeKey>), FlowError> {
    let mut b = Builder::new(chains, net, 1.0)?;
    b.conservation();
    for ci in 0..chains.len() {
        let coefs = b.source_vars(ci);
        b.lp.add_row(format!("demand[{}]", chains[ci].id), coefs, Cmp::Eq, chains[ci].demand);
    }
    if with_bandwidth {
        b.bandwidth()?;
    }
    b.load_balance(eps_for);
    Ok((b.lp, b.keys))
}

/// Human-readable listing of the footprint LP, rows labelled by constraint family.
pub fn dump_flow_lp(chains: &[ChainStages], net: &NetworkView<'_>, epsilon: f64) -> Result<String, FlowError> {
    let (lp, _) = build_footprint_lp(chains, net, &|_| epsilon, true)?;
    Ok(lp.dump().replacen("min:", "footprint min:", 1))
}

/// Minimize inter-rack footprint subject to conservation, coverage,
/// bandwidth and load balance.
pub fn solve_flow_distribution(
    chains: &[ChainStages],
    net: &NetworkView<'_>,
    epsilon: f64,
) -> Result<FlowDistribution, FlowError> {
    let shared = shared_instances(chains);
    let mut eps_shared = epsilon;
    loop {
        let eps_for = |i: InstanceId| if shared.contains(&i) { eps_shared } else { epsilon };
        let (lp, keys) = build_footprint_lp(chains, net, &eps_for, true)?;
        match lp.solve() {
            Ok(sol) => {
                let edges: BTreeMap<EdgeKey, f64> =
                    keys.into_iter().zip(sol.x.iter().map(|v| if *v > 1e-12 { *v } else { 0.0 })).collect();
                let served = chains.iter().map(|c| (c.id.clone(), c.demand)).collect();
                let widened = if eps_shared > epsilon {
                    shared.iter().map(|&i| (i, eps_shared)).collect()
                } else {
                    BTreeMap::new()
                };
                return Ok(FlowDistribution { edges, objective: sol.objective, served, widened });
            }
            Err(LpError::Infeasible(rows)) => {
                if !shared.is_empty() && eps_shared + WIDEN_STEP <= WIDEN_MAX + 1e-12 {
                    eps_shared += WIDEN_STEP;
                    continue;
                }
                // Which family is to blame: drop the bandwidth rows and retry.
                let (relaxed, _) = build_footprint_lp(chains, net, &eps_for, false)?;
                let family = match relaxed.solve() {
                    Ok(_) => ConstraintFamily::Bandwidth,
                    Err(_) => ConstraintFamily::LoadBalance,
                };
                return Err(FlowError::Infeasible { family, rows });
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Options for the max-throughput variant.
#[derive(Debug, Clone, Default)]
pub struct ThroughputOptions<'a> {
    /// Per-instance processing capacity (Mbps); missing means unbounded.
    pub capacity: Option<&'a BTreeMap<InstanceId, f64>>,
    /// Per-edge upper bounds; edges missing from the map are closed.
    pub envelope: Option<&'a BTreeMap<EdgeKey, f64>>,
}

/// Maximize Σ λ_c·V_c, then minimize footprint at that throughput.
pub fn solve_max_throughput(
    chains: &[ChainStages],
    net: &NetworkView<'_>,
    opts: &ThroughputOptions<'_>,
) -> Result<FlowDistribution, FlowError> {
    let mut b = Builder::new(chains, net, 0.0)?;
    if let Some(env) = opts.envelope {
        for (v, k) in b.keys.iter().enumerate() {
            let cap = env.get(k).copied().unwrap_or(0.0).max(0.0);
            b.ub[v] = b.ub[v].min(cap);
        }
    }
    if let Some(cap) = opts.capacity {
        // Tighten bounds so bandwidth rows that can never bind are skipped.
        for (v, k) in b.keys.iter().enumerate() {
            let c = cap.get(&k.to).copied().unwrap_or(f64::INFINITY);
            b.ub[v] = b.ub[v].min(c);
        }
    }
    let footprint_cost: Vec<f64> = b
        .keys
        .iter()
        .map(|k| Ok(if net.rack(k.from)? != net.rack(k.to)? { 1.0 } else { 0.0 }))
        .collect::<Result<_, FlowError>>()?;

    b.conservation();
    let mut lambdas = Vec::with_capacity(chains.len());
    for (ci, c) in chains.iter().enumerate() {
        let l = b.lp.add_var(format!("lambda({})", c.id), -c.demand);
        lambdas.push(l);
        let mut coefs = b.source_vars(ci);
        coefs.push((l, -c.demand));
        b.lp.add_row(format!("demand[{}]", c.id), coefs, Cmp::Eq, 0.0);
        b.lp.add_row(format!("lambda[{}]", c.id), vec![(l, 1.0)], Cmp::Le, 1.0);
    }
    if let Some(cap) = opts.capacity {
        let mut terms: BTreeMap<InstanceId, Vec<usize>> = BTreeMap::new();
        for (ci, c) in chains.iter().enumerate() {
            for (j, s) in c.stages.iter().enumerate() {
                for &i in s {
                    if cap.contains_key(&i) {
                        let vars = if j == 0 { b.out_vars(ci, 0, i) } else { b.in_vars(ci, j, i) };
                        terms.entry(i).or_default().extend(vars);
                    }
                }
            }
        }
        for (i, vars) in terms {
            let coefs = vars.into_iter().map(|v| (v, 1.0)).collect();
            b.lp.add_row(format!("cap[{i}]"), coefs, Cmp::Le, cap[&i].max(0.0));
        }
    }
    if let Some(env) = opts.envelope {
        for v in 0..b.keys.len() {
            let bound = env.get(&b.keys[v]).copied().unwrap_or(0.0).max(0.0);
            if bound < c_stage_bound(chains, &b.keys[v]) {
                b.lp.add_row(format!("env[{v}]"), vec![(v, 1.0)], Cmp::Le, bound);
            }
        }
    }
    b.bandwidth()?;

    let first = b.lp.solve()?;
    let best: f64 = lambdas.iter().zip(chains).map(|(&l, c)| first.x[l] * c.demand).sum();

    // Lexicographic step: hold throughput, minimize footprint.
    let mut lp = b.lp.clone();
    for (v, c) in footprint_cost.iter().enumerate() {
        lp.objective[v] = *c;
    }
    for &l in &lambdas {
        lp.objective[l] = 0.0;
    }
    let coefs = lambdas.iter().zip(chains).map(|(&l, c)| (l, c.demand)).collect();
    let slack = 1e-11 * (1.0 + best.abs());
    lp.add_row("throughput", coefs, Cmp::Ge, (best - slack).max(0.0));
    let sol = match lp.solve() {
        Ok(s) => s,
        // Numerical trouble on the tie-break is not fatal; keep the first optimum.
        Err(_) => first,
    };
    let edges = b.distribution(&sol.x);
    let served = lambdas.iter().zip(chains).map(|(&l, c)| (c.id.clone(), sol.x[l].clamp(0.0, 1.0) * c.demand)).collect();
    let objective = footprint(&edges, net)?;
    Ok(FlowDistribution { edges, objective, served, widened: BTreeMap::new() })
}

fn c_stage_bound(chains: &[ChainStages], k: &EdgeKey) -> f64 {
    chains
        .iter()
        .find(|c| c.id == k.chain)
        .map(|c| c.stage_volume(k.stage + 1, c.demand))
        .unwrap_or(f64::INFINITY)
}

/// Each instance at a position receives an equal share; edges split evenly
/// over downstream instances.
pub fn uniform_distribution(chains: &[ChainStages], net: &NetworkView<'_>) -> Result<FlowDistribution, FlowError> {
    let mut edges = BTreeMap::new();
    for c in chains {
        c.validate()?;
        for j in 0..c.stages.len() - 1 {
            let per_instance_out = c.stage_volume(j + 1, c.demand) / c.stages[j].len() as f64;
            let per_edge = per_instance_out / c.stages[j + 1].len() as f64;
            for &i in &c.stages[j] {
                for &i2 in &c.stages[j + 1] {
                    edges.insert(EdgeKey { chain: c.id.clone(), stage: j, from: i, to: i2 }, per_edge);
                }
            }
        }
    }
    let objective = footprint(&edges, net)?;
    let served = chains.iter().map(|c| (c.id.clone(), c.demand)).collect();
    Ok(FlowDistribution { edges, objective, served, widened: BTreeMap::new() })
}

/// Rescale a distribution's edges so that chain sources carry `demand`.
pub fn scale_to_demand(dist: &FlowDistribution, chains: &[ChainStages]) -> BTreeMap<EdgeKey, f64> {
    let mut out = BTreeMap::new();
    for c in chains {
        let current: f64 = c.stages[0].iter().map(|&i| dist.outflow(c, 0, i)).sum();
        for (k, &v) in dist.edges.range(
            EdgeKey { chain: c.id.clone(), stage: 0, from: InstanceId(0), to: InstanceId(0) }..,
        ) {
            if k.chain != c.id {
                break;
            }
            let f = if current > 1e-12 { v * c.demand / current } else { 0.0 };
            out.insert(k.clone(), f);
        }
    }
    out
}

/// One candidate instance path through a subchain and its weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPath {
    pub instances: Vec<InstanceId>,
    pub weight: f64,
}

/// Proportional decomposition of edge flows over the stages
/// `first..=last` of `chain`. A path's weight is the head's share of the
/// subchain inflow times the conditional split fraction at every hop.
pub fn derive_path_weights(
    dist: &FlowDistribution,
    chain: &ChainStages,
    first: usize,
    last: usize,
) -> Vec<WeightedPath> {
    let heads = &chain.stages[first];
    let head_load: Vec<f64> = heads
        .iter()
        .map(|&h| if first == 0 { dist.outflow(chain, 0, h) } else { dist.inflow(chain, first, h) })
        .collect();
    let total: f64 = head_load.iter().sum();

    let mut out = Vec::new();
    let mut stack: Vec<(Vec<InstanceId>, f64)> = heads
        .iter()
        .zip(&head_load)
        .map(|(&h, &l)| (vec![h], if total > 1e-12 { l / total } else { 1.0 / heads.len() as f64 }))
        .collect();
    stack.reverse();
    while let Some((path, w)) = stack.pop() {
        let j = first + path.len() - 1;
        if j == last {
            out.push(WeightedPath { instances: path, weight: w });
            continue;
        }
        let cur = *path.last().unwrap();
        let next = &chain.stages[j + 1];
        let flows: Vec<f64> = next.iter().map(|&n| dist.flow(&chain.id, j, cur, n)).collect();
        let sum: f64 = flows.iter().sum();
        for (k, &n) in next.iter().enumerate().rev() {
            let frac = if sum > 1e-12 { flows[k] / sum } else { 1.0 / next.len() as f64 };
            let mut p = path.clone();
            p.push(n);
            stack.push((p, w * frac));
        }
    }
    let sum: f64 = out.iter().map(|p| p.weight).sum();
    if sum > 1e-12 {
        for p in &mut out {
            p.weight /= sum;
        }
    } else {
        let n = out.len() as f64;
        for p in &mut out {
            p.weight = 1.0 / n;
        }
    }
    out
}
