//! Discrete-time simulation of one tenant's chains, plus the many-chain
//! scale experiment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{debug, warn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::chain::{transform_chains, ChainError, ChainId};
use crate::deploy::{Deployment, InstanceState};
use crate::flowdist::{
    footprint, scale_to_demand, solve_max_throughput, uniform_distribution, BandwidthModel, ChainStages,
    FlowDistribution, FlowError, NetworkView, ThroughputOptions,
};
use crate::forwarding::{FlowId, ForwardingController, ForwardingError};
use crate::provisioning::{
    place_by_free_slots, place_new_instance, ActionKind, ActionRecord, Engine, Policy, ProvisionError, World,
};
use crate::scenario::{resolve_placements, resolved_config, Scenario, ScenarioError};
use crate::telemetry::{per_packet_time, MetricKind, MetricStore, SubjectId, PER_PACKET_CLAMP};
use crate::topology::{
    build_tree_topology, DataCenterTopology, InstanceId, MachineId, Node, Placement, RackId, Tier, TopologyError,
    TopologySpec,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Provision(#[from] ProvisionError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Forwarding(#[from] ForwardingError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Per-run overrides of scenario fields.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub policy: Option<Policy>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickRow {
    pub tick: u64,
    pub time: f64,
    pub chain: ChainId,
    pub offered: f64,
    pub served: f64,
    pub backlog: f64,
    pub latency_ms: f64,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discrepancy {
    pub time: f64,
    pub flow: FlowId,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub flows_admitted: u64,
    /// Provisioning events at which every live flow was re-traced.
    pub events: u64,
    pub traces_checked: u64,
    pub discrepancies: Vec<Discrepancy>,
    /// Rules present before and after an instance came up whose content changed.
    pub rules_modified: u64,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.discrepancies.is_empty() && self.rules_modified == 0
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub name: String,
    pub policy: Policy,
    pub seed: u64,
    pub rows: Vec<TickRow>,
    pub actions: Vec<ActionRecord>,
    pub final_counts: BTreeMap<String, usize>,
    pub final_instance_loads: BTreeMap<InstanceId, f64>,
    pub final_inter_rack: BTreeMap<ChainId, f64>,
    /// Mean chain traffic per ToR-agg and agg-core link that carried any.
    pub mean_tor_agg_mbps: f64,
    pub mean_agg_core_mbps: f64,
    pub audit: AuditReport,
    pub resolved_config: String,
    pub metrics_csv: Option<String>,
}

impl RunResult {
    pub fn final_instances(&self) -> usize {
        self.final_counts.values().sum()
    }

    pub fn heavyweight_actions(&self) -> usize {
        self.actions.iter().filter(|a| a.kind.is_heavyweight()).count()
    }

    /// Σ served / Σ offered per chain.
    pub fn satisfaction(&self) -> BTreeMap<ChainId, f64> {
        let mut acc: BTreeMap<ChainId, (f64, f64)> = BTreeMap::new();
        for r in &self.rows {
            let e = acc.entry(r.chain.clone()).or_default();
            e.0 += r.served;
            e.1 += r.offered;
        }
        acc.into_iter().map(|(c, (s, o))| (c, if o > 0.0 { (s / o).clamp(0.0, 1.0) } else { 1.0 })).collect()
    }

    pub fn action_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut m = BTreeMap::new();
        for a in &self.actions {
            *m.entry(a.kind.name()).or_insert(0) += 1;
        }
        m
    }

    pub fn timeseries_csv(&self) -> String {
        let elements: BTreeSet<&String> = self.rows.iter().flat_map(|r| r.counts.keys()).collect();
        let mut out = String::from("tick,time,chain,offered_mbps,served_mbps,backlog_requests,latency_ms,instances");
        for e in &elements {
            let _ = write!(out, ",n_{e}");
        }
        out.push('\n');
        for r in &self.rows {
            let total: usize = r.counts.values().sum();
            let _ = write!(
                out,
                "{},{:.3},{},{:.6},{:.6},{:.6},{:.6},{}",
                r.tick, r.time, r.chain, r.offered, r.served, r.backlog, r.latency_ms, total
            );
            for e in &elements {
                let _ = write!(out, ",{}", r.counts.get(*e).copied().unwrap_or(0));
            }
            out.push('\n');
        }
        out
    }

    pub fn actions_csv(&self) -> String {
        crate::provisioning::actions_to_csv(&self.actions)
    }

    pub fn distributions_csv(&self) -> String {
        let mut out = String::from(DIST_HEADER);
        for (c, s) in self.satisfaction() {
            let _ = writeln!(out, "{},{},satisfaction,{c},{s:.6}", self.policy, self.seed);
        }
        for (i, l) in &self.final_instance_loads {
            let _ = writeln!(out, "{},{},instance_mbps,{i},{l:.6}", self.policy, self.seed);
        }
        for (c, v) in &self.final_inter_rack {
            let _ = writeln!(out, "{},{},inter_rack_mbps,{c},{v:.6}", self.policy, self.seed);
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario {} policy {} seed {}", self.name, self.policy, self.seed);
        let sat: Vec<f64> = self.satisfaction().values().copied().collect();
        let _ = writeln!(
            s,
            "satisfaction min {:.3} median {:.3} max {:.3} over {} chain(s)",
            quantile(&sat, 0.0),
            quantile(&sat, 0.5),
            quantile(&sat, 1.0),
            sat.len()
        );
        let counts: Vec<String> = self.action_counts().iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(s, "actions {} (heavyweight {})", counts.join(" "), self.heavyweight_actions());
        let per: Vec<String> = self.final_counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(s, "final middlebox instances {} ({})", self.final_instances(), per.join(" "));
        let _ = writeln!(
            s,
            "mean chain traffic per link: tor-agg {:.1} Mbps, agg-core {:.1} Mbps",
            self.mean_tor_agg_mbps, self.mean_agg_core_mbps
        );
        let _ = writeln!(
            s,
            "affinity audit: {} flows, {} events, {} discrepancies, {} modified rules",
            self.audit.flows_admitted,
            self.audit.events,
            self.audit.discrepancies.len(),
            self.audit.rules_modified
        );
        s
    }

    /// Write config, CSVs and summary into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<(), SimError> {
        let mut files = vec![
            ("resolved_config.toml", self.resolved_config.clone()),
            ("timeseries.csv", self.timeseries_csv()),
            ("actions.csv", self.actions_csv()),
            ("distributions.csv", self.distributions_csv()),
            ("summary.txt", self.summary()),
        ];
        if let Some(m) = &self.metrics_csv {
            files.push(("metrics.csv", m.clone()));
        }
        write_files(dir, &files)
    }
}

/// Telemetry kept when the full metric record is not requested; long
/// enough to hold an episode's baseline window.
const RETENTION_S: f64 = 300.0;

const DIST_HEADER: &str = "policy,seed,kind,key,value\n";

fn write_files(dir: &Path, files: &[(&str, String)]) -> Result<(), SimError> {
    let io = |p: &Path, source| SimError::Io { path: p.display().to_string(), source };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for (name, body) in files {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| io(&p, e))?;
    }
    Ok(())
}

/// Linear-interpolated quantile of unsorted data; 0 when empty.
pub fn quantile(data: &[f64], q: f64) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut v = data.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Assemble the tenant world described by a scenario, with the initial
/// flow distribution installed.
pub fn build_world(scenario: &Scenario, policy: Policy, seed: u64) -> Result<(World, String), SimError> {
    scenario.validate()?;
    let topology = build_tree_topology(&scenario.topology)?;
    let t = transform_chains(&scenario.logical_chains(), &scenario.mbox_specs())?;
    let mut deployment = Deployment::new(scenario.name.clone(), &t, scenario.endpoint_specs());
    deployment.polling = scenario.mboxes.iter().filter(|m| m.polling).map(|m| m.name.clone()).collect();
    for (clone, orig) in &t.origin {
        if deployment.polling.contains(orig) {
            deployment.polling.insert(clone.clone());
        }
    }

    let placements = resolve_placements(scenario, &topology, seed)?;
    let resolved = resolved_config(scenario, &placements, &topology);
    let mut placement = Placement::new(&topology);
    let mut next = 0u32;
    // An operator-named element expands to all of its clones.
    let expand = |e: &str| -> Vec<String> {
        let clones: Vec<String> = t.origin.iter().filter(|(_, o)| o.as_str() == e).map(|(c, _)| c.clone()).collect();
        if clones.is_empty() {
            vec![e.to_string()]
        } else {
            clones
        }
    };
    let mut extra: Vec<(String, MachineId)> = Vec::new();
    for (e, m) in &placements {
        let names = expand(e);
        for (k, name) in names.iter().enumerate() {
            if k == 0 {
                let id = InstanceId(next);
                next += 1;
                placement.place(id, *m)?;
                deployment.add_instance(id, name, InstanceState::Serving, 0.0);
            } else {
                extra.push((name.clone(), *m));
            }
        }
    }
    // Clones beyond the first go next to the original when there is room.
    for (name, m) in extra {
        let m = if placement.free_slots(m) > 0 {
            m
        } else {
            let r = topology.rack_of(m);
            placement
                .free_machine_in_rack(&topology, r)
                .or_else(|| (0..topology.racks.len()).find_map(|r| placement.free_machine_in_rack(&topology, RackId(r))))
                .ok_or(ProvisionError::CapacityExhausted)?
        };
        let id = InstanceId(next);
        next += 1;
        placement.place(id, m)?;
        deployment.add_instance(id, &name, InstanceState::Serving, 0.0);
    }

    let mut forwarding = ForwardingController::new(scenario.name.clone());
    for (i, r) in &deployment.records {
        forwarding.set_kind(*i, deployment.kind_of(&r.element));
    }
    let serving = deployment.serving_map();
    for layout in deployment.layouts() {
        forwarding.register_chain(&layout, &serving, &placement)?;
    }
    let offered = deployment.chains.iter().map(|c| (c.id.clone(), scenario.offered(&c.id.0, 0.0))).collect();
    let mut world = World {
        topology,
        placement,
        deployment,
        forwarding,
        telemetry: MetricStore::new(),
        config: scenario.provisioning.clone(),
        policy,
        launch_delay_s: scenario.sim.launch_delay_s,
        next_instance: next,
        offered,
        replacing: BTreeMap::new(),
    };
    world.topology.set_background(&scenario.background_at(0.0))?;
    world.redistribute(0.0)?;
    Ok((world, resolved))
}

fn rule_snapshot(f: &ForwardingController) -> BTreeMap<String, String> {
    f.rules().iter().map(|r| (format!("{:?}{:?}", r.switch, r.matcher), r.to_string())).collect()
}

/// Flow-level bookkeeping for the affinity audit.
#[derive(Default)]
struct FlowBook {
    expiry: BTreeMap<u64, Vec<FlowId>>,
    admitted: BTreeMap<FlowId, (Vec<InstanceId>, Vec<InstanceId>)>,
    report: AuditReport,
}

impl FlowBook {
    fn admit(&mut self, w: &mut World, chain: &ChainId, rate: f64, expire: u64, now: f64) {
        match w.forwarding.admit_flow(chain, rate) {
            Ok(id) => {
                self.report.flows_admitted += 1;
                self.expiry.entry(expire).or_default().push(id);
                match w.forwarding.trace_flow(id) {
                    Ok(t) => {
                        self.admitted.insert(id, t);
                    }
                    Err(e) => self.report.discrepancies.push(Discrepancy { time: now, flow: id, detail: e.to_string() }),
                }
            }
            Err(e) => warn!("t={now}: flow admission on {chain} failed: {e}"),
        }
    }

    fn expire(&mut self, w: &mut World, tick: u64) {
        let due: Vec<u64> = self.expiry.range(..=tick).map(|(k, _)| *k).collect();
        for k in due {
            for id in self.expiry.remove(&k).unwrap_or_default() {
                self.admitted.remove(&id);
                let _ = w.forwarding.finish_flow(id);
            }
        }
    }

    /// Re-trace every live flow and compare with admission and pinning.
    fn check(&mut self, f: &ForwardingController, now: f64) {
        self.report.events += 1;
        for (id, (fwd0, rev0)) in &self.admitted {
            self.report.traces_checked += 1;
            let detail = match f.trace_flow(*id) {
                Err(e) => Some(e.to_string()),
                Ok((fwd, rev)) => {
                    let pinned = f.pinned_sequence(*id).unwrap_or_default();
                    let mut back = pinned.clone();
                    back.reverse();
                    if &fwd != fwd0 || &rev != rev0 {
                        Some(format!("path changed: {fwd0:?} -> {fwd:?}"))
                    } else if fwd != pinned || rev != back {
                        Some(format!("trace {fwd:?} differs from pinned {pinned:?}"))
                    } else {
                        None
                    }
                }
            };
            if let Some(detail) = detail {
                self.report.discrepancies.push(Discrepancy { time: now, flow: *id, detail });
            }
        }
    }
}

/// Served traffic for the given per-chain demand under the installed
/// distribution, link state and instance capacities.
fn serve(w: &World, demand: &BTreeMap<ChainId, f64>) -> (Vec<ChainStages>, FlowDistribution) {
    let chains = w.deployment.stages(demand);
    let env = scale_to_demand(&w.deployment.distribution, &chains);
    let caps = w.deployment.capacities();
    let avail = w.residual_capacity();
    let net = NetworkView { topology: &w.topology, placement: &w.placement, available: &avail, model: BandwidthModel::Link };
    let opts = ThroughputOptions { capacity: Some(&caps), envelope: Some(&env) };
    match solve_max_throughput(&chains, &net, &opts) {
        Ok(d) => (chains, d),
        Err(e) => {
            warn!("served-traffic LP failed: {e}");
            (chains, FlowDistribution::default())
        }
    }
}

fn link_tier(topo: &DataCenterTopology, l: usize) -> Option<(Tier, Tier)> {
    let tier = |n: Node| match n {
        Node::Machine(_) => None,
        Node::Switch(s) => Some(topo.switches[s.0].tier),
    };
    let (a, b) = topo.links[l].endpoints;
    Some((tier(a)?, tier(b)?))
}

/// Run a scenario tick by tick.
pub fn run_scenario(scenario: &Scenario, opts: RunOptions) -> Result<RunResult, SimError> {
    let seed = opts.seed.unwrap_or(scenario.seed);
    let policy = opts.policy.unwrap_or(scenario.policy);
    let mut sc = scenario.clone();
    sc.seed = seed;
    sc.policy = policy;
    let (mut w, resolved) = build_world(&sc, policy, seed)?;
    let mut engine = Engine::new();
    let p = &sc.sim;
    let tick_s = sc.tick_s;
    let n_ticks = (sc.duration_s / tick_s).round() as u64;
    let chain_ids: Vec<ChainId> = w.deployment.chains.iter().map(|c| c.id.clone()).collect();
    let mut backlog_mbit: BTreeMap<ChainId, f64> = chain_ids.iter().map(|c| (c.clone(), 0.0)).collect();
    let backlog_cap = 100.0 * p.request_mbit;
    let lifetime_ticks = ((p.flow_lifetime_s / tick_s).round() as u64).max(1);
    let mut book = FlowBook::default();
    let mut rows = Vec::new();
    let mut scripted_done = 0usize;
    let mbox_names: Vec<String> = w.deployment.mboxes.keys().cloned().collect();
    let mut tier_sum = [0.0f64; 2];
    let mut tier_links: [BTreeSet<usize>; 2] = Default::default();

    for k in 0..n_ticks {
        let t = k as f64 * tick_s;
        w.topology.set_background(&sc.background_at(t))?;
        w.offered = chain_ids.iter().map(|c| (c.clone(), sc.offered(&c.0, t))).collect();

        if let Some(s) = &sc.scripted_scaling {
            let due = (t / s.interval_s).floor() as usize;
            if t > 0.0 && scripted_done < s.rounds * mbox_names.len() && due > scripted_done {
                let e = &mbox_names[scripted_done % mbox_names.len()];
                scripted_done += 1;
                match w.horizontal_scale(e, t) {
                    Ok((id, c)) => {
                        engine.await_instance(id);
                        engine.record(&w, t, ActionKind::Scale, format!("{e}:{id}@{} scripted", c.rack));
                    }
                    Err(err) => warn!("t={t}: scripted scale of {e} failed: {err}"),
                }
                book.check(&w.forwarding, t);
            }
        }

        // Backlog is offered again only while a chain keeps up with new demand.
        let (mut stages, mut served_dist) = serve(&w, &w.offered);
        let keeps_up = |d: &FlowDistribution, c: &ChainId| d.served.get(c).copied().unwrap_or(0.0) >= w.offered[c] - 1e-6;
        if chain_ids.iter().any(|c| backlog_mbit[c] > 0.0 && keeps_up(&served_dist, c)) {
            let demand: BTreeMap<ChainId, f64> = chain_ids
                .iter()
                .map(|c| {
                    let extra = if keeps_up(&served_dist, c) { backlog_mbit[c] / tick_s } else { 0.0 };
                    (c.clone(), w.offered[c] + extra)
                })
                .collect();
            (stages, served_dist) = serve(&w, &demand);
        }
        if log::log_enabled!(log::Level::Debug) {
            for (k, v) in &served_dist.edges {
                debug!("t={t} served {}[{}] {}->{} {v:.3} (configured {:.3})", k.chain, k.stage, k.from, k.to,
                    w.deployment.distribution.edges.get(k).copied().unwrap_or(0.0));
            }
        }
        let avail = w.residual_capacity();
        {
            let net = NetworkView { topology: &w.topology, placement: &w.placement, available: &avail, model: BandwidthModel::Link };
            let traffic = served_dist.link_traffic(&net)?;
            w.topology.apply_path_traffic(traffic)?;
        }
        for (l, link) in w.topology.links.iter().enumerate() {
            if link.chain_load > 1e-9 {
                match link_tier(&w.topology, l) {
                    Some((Tier::Tor, Tier::Agg)) | Some((Tier::Agg, Tier::Tor)) => {
                        tier_sum[0] += link.chain_load;
                        tier_links[0].insert(l);
                    }
                    Some(_) => {
                        tier_sum[1] += link.chain_load;
                        tier_links[1].insert(l);
                    }
                    None => {}
                }
            }
        }

        // Forwarding plane: retire old flows, admit new ones.
        book.expire(&mut w, k);
        for c in &chain_ids {
            if w.offered[c] > 0.0 {
                let rate = w.offered[c] / (p.flows_per_tick.max(1) as f64 * lifetime_ticks as f64);
                for _ in 0..p.flows_per_tick {
                    book.admit(&mut w, c, rate, k + lifetime_ticks, t);
                }
            }
        }

        // Telemetry.
        let loads = served_dist.instance_loads(&stages);
        let mut egress: BTreeMap<InstanceId, f64> = BTreeMap::new();
        for c in &stages {
            for (j, s) in c.stages.iter().enumerate() {
                for &i in s {
                    *egress.entry(i).or_default() += served_dist.outflow(c, j, i);
                }
            }
        }
        let store = &mut w.telemetry;
        let mut util: BTreeMap<InstanceId, f64> = BTreeMap::new();
        for (i, rec) in &w.deployment.records {
            if rec.state != InstanceState::Serving || w.deployment.is_endpoint(&rec.element) {
                continue;
            }
            let cap = w.deployment.capacity_of(&rec.element).unwrap_or(f64::INFINITY);
            let load = loads.get(i).copied().unwrap_or(0.0);
            let u = (load / cap).clamp(0.0, 1.0);
            util.insert(*i, u);
            let subj = SubjectId::Instance(*i);
            let cpu = if w.deployment.polling.contains(&rec.element) { 1.0 } else { u };
            store.put(subj.clone(), MetricKind::CpuFrac, t, cpu).ok();
            store.put(subj.clone(), MetricKind::MemFrac, t, 0.2 + 0.4 * u).ok();
            store.put(subj.clone(), MetricKind::PerPacketTimeUs, t, per_packet_time(p.base_packet_time_us, u)).ok();
            store.put(subj.clone(), MetricKind::IngressMbps, t, load).ok();
            store.put(subj, MetricKind::EgressMbps, t, egress.get(i).copied().unwrap_or(0.0)).ok();
        }
        for link in &w.topology.links {
            store.put(SubjectId::Link(link.id), MetricKind::LinkMbps, t, link.background_load + link.chain_load).ok();
        }
        let configured = scale_to_demand(&w.deployment.distribution, &stages);
        for c in &stages {
            let offered = w.offered[&c.id];
            let deliverable = served_dist.served.get(&c.id).copied().unwrap_or(0.0);
            let served = deliverable.min(offered);
            let b = backlog_mbit.get_mut(&c.id).expect("chain");
            *b = (*b + (offered - deliverable) * tick_s).clamp(0.0, backlog_cap);
            if *b < 1e-6 {
                // Solver round-off, not a queue.
                *b = 0.0;
            }
            let backlog = *b / p.request_mbit;

            // Latency: the most utilized instance or link on the chain's paths.
            let mut u_max: f64 = 0.0;
            for s in &c.stages {
                for i in s {
                    u_max = u_max.max(util.get(i).copied().unwrap_or(0.0));
                }
            }
            for (key, &v) in configured.range(
                crate::flowdist::EdgeKey { chain: c.id.clone(), stage: 0, from: InstanceId(0), to: InstanceId(0) }..,
            ) {
                if key.chain != c.id {
                    break;
                }
                if v <= 1e-9 {
                    continue;
                }
                for l in w.topology.virtual_link_path(&w.placement, key.from, key.to)? {
                    u_max = u_max.max(w.topology.link(l).utilization());
                }
            }
            let latency = (p.base_latency_ms / (1.0 - u_max).max(1e-3)).min(PER_PACKET_CLAMP * p.base_latency_ms);
            let subj = SubjectId::App(c.id.clone());
            store.put(subj.clone(), MetricKind::IngressMbps, t, offered).ok();
            store.put(subj.clone(), MetricKind::EgressMbps, t, served).ok();
            store.put(subj.clone(), MetricKind::LatencyMs, t, latency).ok();
            store.put(subj, MetricKind::BacklogRequests, t, backlog).ok();
            rows.push(TickRow {
                tick: k,
                time: t,
                chain: c.id.clone(),
                offered,
                served,
                backlog,
                latency_ms: latency,
                counts: BTreeMap::new(),
            });
        }

        // Provisioning.
        let n_actions = engine.actions.len();
        let activating = w
            .deployment
            .records
            .values()
            .any(|r| r.state == InstanceState::Booting && r.ready_at <= t + 1e-9);
        let before = activating.then(|| rule_snapshot(&w.forwarding));
        engine.tick(&mut w, t)?;
        if let Some(before) = before {
            let after = rule_snapshot(&w.forwarding);
            book.report.rules_modified +=
                before.iter().filter(|(k, v)| after.get(*k).is_some_and(|a| a != *v)).count() as u64;
        }
        if engine.actions.len() > n_actions || activating {
            book.check(&w.forwarding, t);
        }
        let counts = w.deployment.counts();
        let n = chain_ids.len();
        let len = rows.len();
        for r in &mut rows[len - n..] {
            r.counts = counts.clone();
        }
        if !p.record_metrics {
            w.telemetry.prune_before(t - RETENTION_S);
        }
    }

    let t_end = n_ticks as f64 * tick_s;
    let stages = w.stages(t_end);
    let final_instance_loads = {
        let (st, d) = serve(&w, &w.offered.clone());
        let loads = d.instance_loads(&st);
        let _ = stages;
        w.middlebox_instances().into_iter().map(|i| (i, loads.get(&i).copied().unwrap_or(0.0))).collect()
    };
    let avail = w.residual_capacity();
    let net = NetworkView { topology: &w.topology, placement: &w.placement, available: &avail, model: BandwidthModel::Link };
    let final_inter_rack = chain_ids
        .iter()
        .map(|c| (c.clone(), w.deployment.distribution.inter_rack_volume(c, &net)))
        .collect();
    let mean = |k: usize| if tier_links[k].is_empty() { 0.0 } else { tier_sum[k] / (tier_links[k].len() as f64 * n_ticks as f64) };
    Ok(RunResult {
        name: sc.name.clone(),
        policy,
        seed,
        rows,
        actions: engine.actions,
        final_counts: w.deployment.counts(),
        final_instance_loads,
        final_inter_rack,
        mean_tor_agg_mbps: mean(0),
        mean_agg_core_mbps: mean(1),
        audit: book.report,
        resolved_config: resolved,
        metrics_csv: p.record_metrics.then(|| w.telemetry.to_csv()),
    })
}

/// Replay a scenario and report flows whose forwarding changed.
pub fn affinity_audit(scenario: &Scenario, opts: RunOptions) -> Result<AuditReport, SimError> {
    Ok(run_scenario(scenario, opts)?.audit)
}

/// Audit a live world: admit `n` flows per chain, apply `mutate`, and
/// re-trace. Used for fault injection.
pub fn audit_after<F>(w: &mut World, n: usize, mutate: F) -> AuditReport
where
    F: FnOnce(&mut World, &[FlowId]),
{
    let mut book = FlowBook::default();
    let chains: Vec<ChainId> = w.deployment.chains.iter().map(|c| c.id.clone()).collect();
    for c in &chains {
        for _ in 0..n {
            book.admit(w, c, 1.0, u64::MAX, 0.0);
        }
    }
    let ids: Vec<FlowId> = book.admitted.keys().copied().collect();
    mutate(w, &ids);
    book.check(&w.forwarding, 0.0);
    book.report
}

// ---------------------------------------------------------------------------
// Scale experiment

/// Template chain of the scale experiment: element, capacity (None =
/// unbounded), initial instance count.
pub const SCALE_TEMPLATE: [(&str, Option<f64>, usize); 5] =
    [("gen", Some(100.0), 3), ("A", Some(60.0), 2), ("B", Some(50.0), 1), ("C", Some(110.0), 2), ("srv", None, 4)];

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleConfig {
    pub chains: usize,
    pub topology: TopologySpec,
    pub seeds: Vec<u64>,
    pub policies: Vec<Policy>,
    /// Smallest served-volume gain (Mbps) worth another instance.
    pub min_gain_mbps: f64,
    pub max_scale_steps: usize,
    /// Chains take turns adding one instance; otherwise each chain grows
    /// to completion before the next starts.
    pub interleave: bool,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig {
            chains: 200,
            topology: TopologySpec::new(500, 1, 10).with_fanouts(3, 167),
            seeds: vec![1, 2, 3],
            policies: vec![Policy::Stratos, Policy::Uniformflow],
            min_gain_mbps: 1.0,
            max_scale_steps: 40,
            interleave: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutcome {
    pub chain: usize,
    pub demand: f64,
    pub served: f64,
    /// Middlebox instances the chain ended with.
    pub instances: usize,
    pub instance_loads: Vec<f64>,
    pub inter_rack_mbps: f64,
}

impl ChainOutcome {
    pub fn satisfaction(&self) -> f64 {
        (self.served / self.demand).clamp(0.0, 1.0)
    }

    /// Served volume per middlebox instance.
    pub fn efficiency(&self) -> f64 {
        self.served / self.instances.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleRun {
    pub policy: Policy,
    pub seed: u64,
    pub chains: Vec<ChainOutcome>,
    pub elapsed_s: f64,
}

impl ScaleRun {
    pub fn fraction_at_least(&self, sat: f64) -> f64 {
        self.chains.iter().filter(|c| c.satisfaction() >= sat - 1e-9).count() as f64 / self.chains.len().max(1) as f64
    }

    /// Per-instance efficiency values, one entry per middlebox instance.
    pub fn instance_efficiencies(&self) -> Vec<f64> {
        self.chains.iter().flat_map(|c| std::iter::repeat_n(c.efficiency(), c.instances)).collect()
    }

    pub fn total_instances(&self) -> usize {
        self.chains.iter().map(|c| c.instances).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleReport {
    pub config: ScaleConfig,
    pub runs: Vec<ScaleRun>,
}

impl ScaleReport {
    pub fn runs_of(&self, p: Policy) -> impl Iterator<Item = &ScaleRun> {
        self.runs.iter().filter(move |r| r.policy == p)
    }

    /// Mean over seeds of a per-run statistic.
    pub fn mean_over_seeds(&self, p: Policy, f: impl Fn(&ScaleRun) -> f64) -> f64 {
        let v: Vec<f64> = self.runs_of(p).map(f).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn distributions_csv(&self) -> String {
        let mut out = String::from(DIST_HEADER);
        for r in &self.runs {
            for c in &r.chains {
                let _ = writeln!(out, "{},{},satisfaction,c{},{:.6}", r.policy, r.seed, c.chain, c.satisfaction());
            }
            for c in &r.chains {
                let _ = writeln!(out, "{},{},instance_efficiency_mbps,c{},{:.6}", r.policy, r.seed, c.chain, c.efficiency());
            }
            for c in &r.chains {
                for (k, l) in c.instance_loads.iter().enumerate() {
                    let _ = writeln!(out, "{},{},instance_mbps,c{}.{k},{l:.6}", r.policy, r.seed, c.chain);
                }
            }
            for c in &r.chains {
                let _ = writeln!(out, "{},{},inter_rack_mbps,c{},{:.6}", r.policy, r.seed, c.chain, c.inter_rack_mbps);
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "scale experiment: {} chains, {} racks, seeds {:?}",
            self.config.chains, self.config.topology.racks, self.config.seeds
        );
        for &p in &self.config.policies {
            let at30 = self.mean_over_seeds(p, |r| r.fraction_at_least(0.30));
            let at85 = self.mean_over_seeds(p, |r| r.fraction_at_least(0.85));
            let eff5 = self.mean_over_seeds(p, |r| {
                let e = r.instance_efficiencies();
                e.iter().filter(|&&x| x >= 5.0).count() as f64 / e.len().max(1) as f64
            });
            let med = self.mean_over_seeds(p, |r| quantile(&r.instance_efficiencies(), 0.5));
            let inst = self.mean_over_seeds(p, |r| r.total_instances() as f64);
            let sat: Vec<f64> = self.runs_of(p).flat_map(|r| r.chains.iter().map(ChainOutcome::satisfaction)).collect();
            let _ = writeln!(
                s,
                "{p}: satisfaction p10 {:.3} median {:.3} p90 {:.3}; >=30% {:.1}% of chains, >=85% {:.1}%; \
                 instances >=5 Mbps {:.1}%, median {:.1} Mbps/instance; {:.0} middlebox instances",
                quantile(&sat, 0.1),
                quantile(&sat, 0.5),
                quantile(&sat, 0.9),
                100.0 * at30,
                100.0 * at85,
                100.0 * eff5,
                med,
                inst
            );
        }
        s
    }

    pub fn write_outputs(&self, dir: &Path) -> Result<(), SimError> {
        write_files(dir, &[("distributions.csv", self.distributions_csv()), ("summary.txt", self.summary())])
    }
}

/// One chain's instances by template position.
struct ScaleChain {
    id: ChainId,
    stages: Vec<Vec<InstanceId>>,
}

impl ScaleChain {
    fn as_stages(&self, extra: Option<(usize, InstanceId)>) -> ChainStages {
        let mut stages = self.stages.clone();
        if let Some((pos, i)) = extra {
            stages[pos].push(i);
        }
        let demand = SCALE_TEMPLATE[0].1.unwrap_or(0.0) * SCALE_TEMPLATE[0].2 as f64;
        ChainStages { id: self.id.clone(), gains: vec![1.0; stages.len()], stages, demand }
    }
}

struct ScaleState<'a> {
    topo: &'a DataCenterTopology,
    policy: Policy,
    caps: BTreeMap<InstanceId, f64>,
    available: Vec<f64>,
}

impl ScaleState<'_> {
    /// Served distribution of one chain placed per `local`.
    fn evaluate(&self, chain: &ChainStages, local: &Placement) -> Result<FlowDistribution, FlowError> {
        let net = NetworkView { topology: self.topo, placement: local, available: &self.available, model: BandwidthModel::Link };
        let chains = std::slice::from_ref(chain);
        let env;
        let envelope = if self.policy.uniform() {
            env = uniform_distribution(chains, &net)?.edges;
            Some(&env)
        } else {
            None
        };
        solve_max_throughput(chains, &net, &ThroughputOptions { capacity: Some(&self.caps), envelope })
    }
}

/// Place every chain's initial instances, then grow chains until each is
/// satisfied, no instance adds throughput, or slots run out.
pub fn run_scale_once(cfg: &ScaleConfig, policy: Policy, seed: u64) -> Result<ScaleRun, SimError> {
    let start = Instant::now();
    let topo = build_tree_topology(&cfg.topology)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut placement = Placement::new(&topo);
    let mut next = 0u32;
    let mut caps = BTreeMap::new();
    let mut chains = Vec::with_capacity(cfg.chains);
    for c in 0..cfg.chains {
        let mut stages = Vec::new();
        for (_, cap, n) in SCALE_TEMPLATE {
            let mut pos = Vec::new();
            for _ in 0..n {
                let open: Vec<MachineId> =
                    (0..topo.racks.len()).filter_map(|r| placement.free_machine_in_rack(&topo, RackId(r))).collect();
                if open.is_empty() {
                    return Err(ProvisionError::CapacityExhausted.into());
                }
                let m = open[rng.gen_range(0..open.len())];
                let id = InstanceId(next);
                next += 1;
                placement.place(id, m)?;
                if let Some(cap) = cap {
                    caps.insert(id, cap);
                }
                pos.push(id);
            }
            stages.push(pos);
        }
        chains.push(ScaleChain { id: ChainId(format!("c{c}")), stages });
    }

    let capacity: Vec<f64> = topo.links.iter().map(|l| l.capacity).collect();
    let mut st = ScaleState { topo: &topo, policy, caps, available: capacity.clone() };
    let scalable = [1usize, 2, 3];
    let probe = InstanceId(u32::MAX);
    let mut exhausted = false;

    // Chain-local placements keep probes cheap.
    let mut locals = Vec::with_capacity(chains.len());
    for ch in &chains {
        let mut local = Placement::new(&topo);
        for s in &ch.stages {
            for &i in s {
                local.place(i, placement.machine(i).expect("placed"))?;
            }
        }
        locals.push(local);
    }
    // Link volume each chain currently uses, and the sum over all chains.
    let mut used: Vec<Vec<(usize, f64)>> = vec![Vec::new(); chains.len()];
    let mut total = vec![0.0; capacity.len()];
    let mut active = vec![true; chains.len()];
    let mut steps = vec![0usize; chains.len()];

    // Chains take turns growing by one instance, so early chains cannot
    // claim all shared bandwidth before later ones start.
    let mut cursor = 0;
    loop {
        let mut any = false;
        for ci in 0..chains.len() {
            if !active[ci] || (!cfg.interleave && ci != cursor) {
                continue;
            }
            any = true;
            for &(l, v) in &used[ci] {
                total[l] -= v;
            }
            for (l, a) in st.available.iter_mut().enumerate() {
                *a = (capacity[l] - total[l]).max(0.0);
            }
            let ch = &mut chains[ci];
            let local = &mut locals[ci];
            let cs = ch.as_stages(None);
            let cur = st.evaluate(&cs, local)?;
            let served = cur.served[&ch.id];
            let mut committed = false;
            if served < cs.demand - 1e-6 && steps[ci] < cfg.max_scale_steps && !exhausted {
                let loads = cur.instance_loads(std::slice::from_ref(&cs));
                let mut order: Vec<(f64, usize)> = scalable
                    .iter()
                    .map(|&pos| {
                        let cap: f64 = ch.stages[pos].iter().map(|i| st.caps[i]).sum();
                        let load: f64 = ch.stages[pos].iter().map(|i| loads.get(i).copied().unwrap_or(0.0)).sum();
                        (load / cap, pos)
                    })
                    .collect();
                order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

                for &(_, pos) in &order {
                    let anchors: BTreeSet<RackId> = [pos - 1, pos + 1]
                        .iter()
                        .flat_map(|&q| ch.stages[q].iter())
                        .filter_map(|&i| placement.rack(&topo, i))
                        .collect();
                    let cap = SCALE_TEMPLATE[pos].1.expect("middlebox capacity");
                    st.caps.insert(probe, cap);
                    let mut scored: BTreeMap<MachineId, f64> = BTreeMap::new();
                    let mut probe_at = |m: MachineId| {
                        let mut pl = local.clone();
                        pl.place(probe, m).ok()?;
                        let d = st.evaluate(&ch.as_stages(Some((pos, probe))), &pl).ok()?;
                        let s = d.served[&ch.id];
                        scored.insert(m, s);
                        Some((-s, d.objective))
                    };
                    let choice = if policy.local_only() {
                        place_by_free_slots(&topo, &placement).inspect(|c| {
                            probe_at(c.machine);
                        })
                    } else {
                        place_new_instance(&topo, &placement, &anchors, |_| true, &mut probe_at)
                    };
                    st.caps.remove(&probe);
                    let choice = match choice {
                        Ok(c) => c,
                        Err(ProvisionError::CapacityExhausted) => {
                            exhausted = true;
                            break;
                        }
                        Err(e) => return Err(e.into()),
                    };
                    let gain = scored.get(&choice.machine).copied().unwrap_or(0.0) - served;
                    if gain > cfg.min_gain_mbps {
                        let id = InstanceId(next);
                        next += 1;
                        placement.place(id, choice.machine)?;
                        local.place(id, choice.machine)?;
                        st.caps.insert(id, cap);
                        ch.stages[pos].push(id);
                        committed = true;
                        break;
                    }
                }
            }
            if committed {
                steps[ci] += 1;
            } else {
                active[ci] = false;
                cursor += 1;
            }
            // Re-commit the chain's traffic as it now stands.
            let cs = ch.as_stages(None);
            let d = st.evaluate(&cs, local)?;
            let net = NetworkView { topology: &topo, placement: local, available: &st.available, model: BandwidthModel::Link };
            let mut mine: BTreeMap<usize, f64> = BTreeMap::new();
            for (path, v) in d.link_traffic(&net)? {
                for l in path {
                    *mine.entry(l.0).or_insert(0.0) += v;
                }
            }
            used[ci] = mine.into_iter().collect();
            for &(l, v) in &used[ci] {
                total[l] += v;
            }
        }
        if !any {
            break;
        }
    }

    if log::log_enabled!(log::Level::Debug) {
        let mut sat = [0usize; 3];
        let mut cnt = [0usize; 3];
        for l in 0..topo.links.len() {
            let k = match link_tier(&topo, l) { Some((Tier::Tor, Tier::Agg)) | Some((Tier::Agg, Tier::Tor)) => 1, Some(_) => 2, None => 0 };
            cnt[k] += 1;
            if total[l] > 0.99 * capacity[l] { sat[k] += 1; }
        }
        debug!("{policy} seed {seed}: saturated links access {}/{} tor-agg {}/{} agg-core {}/{}; steps {:?}; exhausted {exhausted}",
            sat[0], cnt[0], sat[1], cnt[1], sat[2], cnt[2], quantile(&steps.iter().map(|&x| x as f64).collect::<Vec<_>>(), 0.5));
    }
    let mut outcomes = Vec::with_capacity(chains.len());
    for (ci, ch) in chains.iter().enumerate() {
        for &(l, v) in &used[ci] {
            total[l] -= v;
        }
        for (l, a) in st.available.iter_mut().enumerate() {
            *a = (capacity[l] - total[l]).max(0.0);
        }
        let local = &locals[ci];
        let cs = ch.as_stages(None);
        let fin = st.evaluate(&cs, local)?;
        let net = NetworkView { topology: &topo, placement: local, available: &st.available, model: BandwidthModel::Link };
        let inter = footprint(&fin.edges, &net)?;
        for &(l, v) in &used[ci] {
            total[l] += v;
        }
        let loads = fin.instance_loads(std::slice::from_ref(&cs));
        let mboxes: Vec<InstanceId> = scalable.iter().flat_map(|&p| ch.stages[p].iter().copied()).collect();
        outcomes.push(ChainOutcome {
            chain: ci,
            demand: cs.demand,
            served: fin.served[&ch.id],
            instances: mboxes.len(),
            instance_loads: mboxes.iter().map(|i| loads.get(i).copied().unwrap_or(0.0)).collect(),
            inter_rack_mbps: inter,
        });
    }
    Ok(ScaleRun { policy, seed, chains: outcomes, elapsed_s: start.elapsed().as_secs_f64() })
}

/// All (policy, seed) runs, executed on parallel threads.
pub fn run_scale_experiment(cfg: &ScaleConfig) -> Result<ScaleReport, SimError> {
    let jobs: Vec<(Policy, u64)> =
        cfg.policies.iter().flat_map(|&p| cfg.seeds.iter().map(move |&s| (p, s))).collect();
    let results: Vec<Result<ScaleRun, SimError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs.iter().map(|&(p, s)| scope.spawn(move || run_scale_once(cfg, p, s))).collect();
        handles.into_iter().map(|h| h.join().expect("scale worker panicked")).collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(ScaleReport { config: cfg.clone(), runs })
}
