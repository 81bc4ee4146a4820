//! Bottleneck detection and the staged provisioning state machine.
//!
//! A tenant's world (topology view, placement, deployment, forwarding state
//! and telemetry) is driven one tick at a time by an [`Engine`]. On an SLO
//! violation the engine first re-solves the flow distribution, waits, then
//! escalates to scaling, migration and finally scaling everything.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::ChainId;
use crate::deploy::{Deployment, InstanceState};
use crate::flowdist::{
    derive_path_weights, solve_flow_distribution, solve_max_throughput, uniform_distribution, BandwidthModel,
    ChainStages, FlowDistribution, FlowError, NetworkView, ThroughputOptions,
};
use crate::forwarding::{ForwardingController, ForwardingError, TAG_SPACE};
use crate::telemetry::{compute_gain_factor, measure_chain_volume, MetricKind, MetricStore, SubjectId, Window};
use crate::topology::{DataCenterTopology, InstanceId, LinkId, MachineId, Placement, RackId, TopologyError};

#[derive(Debug, Error)]
pub enum ProvisionError {
    #[error("invalid provisioning config: {0}")]
    Config(String),
    #[error("no free VM slot in any rack")]
    CapacityExhausted,
    #[error("no rack satisfies the placement constraints")]
    NoFeasibleLocation,
    #[error("unknown {0}")]
    Unknown(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Forwarding(#[from] ForwardingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProvisioningConfig {
    /// CPU/memory level threshold.
    pub alpha: f64,
    /// Required growth of CPU/memory over the baseline window.
    pub beta: f64,
    /// Required growth of per-packet processing time.
    pub delta_compute: f64,
    /// Available bandwidth (Mbps) under which a virtual link is congested.
    pub delta_net: f64,
    /// Per-packet time drop that makes an instance a de-provisioning candidate.
    pub delta_deprov: f64,
    /// Headroom factor for migration targets.
    pub rho: f64,
    /// Load-balance leeway.
    pub epsilon: f64,
    pub slo_latency_ms: f64,
    pub slo_backlog: f64,
    pub slo_window_s: f64,
    pub post_flowdist_wait_s: f64,
    pub fallback_scale_count: u32,
    /// Bandwidth rows the controller plans with.
    pub bandwidth_model: BandwidthModel,
}

impl Default for ProvisioningConfig {
    fn default() -> Self {
        ProvisioningConfig {
            alpha: 0.85,
            beta: 1.1,
            delta_compute: 2.0,
            delta_net: 50.0,
            delta_deprov: 0.5,
            rho: 1.25,
            epsilon: 0.15,
            slo_latency_ms: 45.0,
            slo_backlog: 10.0,
            slo_window_s: 10.0,
            post_flowdist_wait_s: 20.0,
            fallback_scale_count: 1,
            bandwidth_model: BandwidthModel::RackPair,
        }
    }
}

impl ProvisioningConfig {
    pub fn validate(&self) -> Result<(), ProvisionError> {
        let bad = |m: &str| Err(ProvisionError::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(self.beta > 1.0) {
            return bad("beta must exceed 1");
        }
        if !(self.delta_compute > 1.0) {
            return bad("delta_compute must exceed 1");
        }
        if !(self.delta_deprov > 0.0 && self.delta_deprov < 1.0) {
            return bad("delta_deprov must lie in (0, 1)");
        }
        if !(self.rho >= 1.0) {
            return bad("rho must be at least 1");
        }
        if !(self.epsilon >= 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in [0, 1)");
        }
        if !(self.delta_net >= 0.0 && self.slo_latency_ms > 0.0 && self.slo_backlog >= 0.0) {
            return bad("SLO thresholds must be non-negative");
        }
        if !(self.slo_window_s > 0.0 && self.post_flowdist_wait_s >= 0.0) {
            return bad("slo_window_s must be positive");
        }
        Ok(())
    }

    fn window(&self) -> Window {
        Window::mean(self.slo_window_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Stratos,
    Heavywgt,
    Localview,
    Uniformflow,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Stratos, Policy::Heavywgt, Policy::Localview, Policy::Uniformflow];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Stratos => "stratos",
            Policy::Heavywgt => "heavywgt",
            Policy::Localview => "localview",
            Policy::Uniformflow => "uniformflow",
        }
    }

    /// Re-solves the distribution before any heavyweight step.
    pub fn flow_dist_first(self) -> bool {
        self == Policy::Stratos
    }

    /// Looks at congested virtual links and migrates.
    pub fn network_stage(self) -> bool {
        matches!(self, Policy::Stratos | Policy::Heavywgt)
    }

    pub fn local_only(self) -> bool {
        matches!(self, Policy::Localview | Policy::Uniformflow)
    }

    pub fn uniform(self) -> bool {
        self == Policy::Uniformflow
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown policy `{s}` (expected stratos, heavywgt, localview or uniformflow)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActionKind {
    FlowDist,
    Scale,
    Migrate,
    FallbackScaleAll,
    Deprovision,
    None,
}

impl ActionKind {
    pub fn name(self) -> &'static str {
        match self {
            ActionKind::FlowDist => "flow_dist",
            ActionKind::Scale => "scale",
            ActionKind::Migrate => "migrate",
            ActionKind::FallbackScaleAll => "fallback_scale_all",
            ActionKind::Deprovision => "deprovision",
            ActionKind::None => "none",
        }
    }

    pub fn is_heavyweight(self) -> bool {
        matches!(self, ActionKind::Scale | ActionKind::Migrate | ActionKind::FallbackScaleAll)
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionRecord {
    pub step: u64,
    pub time: f64,
    pub policy: Policy,
    pub kind: ActionKind,
    pub targets: String,
    pub objective_before: f64,
    pub objective_after: f64,
}

pub fn actions_to_csv(actions: &[ActionRecord]) -> String {
    let mut out = String::from("step,time,policy,kind,targets,objective_before,objective_after\n");
    for a in actions {
        out.push_str(&format!(
            "{},{:.3},{},{},{},{:.6},{:.6}\n",
            a.step,
            a.time,
            a.policy,
            a.kind,
            a.targets.replace(',', ";"),
            a.objective_before,
            a.objective_after
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SloStatus {
    pub violated: bool,
    /// False until a full window of samples exists.
    pub covered: bool,
    pub latency_ms: Option<f64>,
    pub backlog: Option<f64>,
}

/// A chain violates its SLO when every latency sample, or every backlog
/// sample, in a fully covered window exceeds its threshold.
pub fn check_slo(store: &MetricStore, chain: &ChainId, cfg: &ProvisioningConfig, now: f64) -> SloStatus {
    let subj = SubjectId::App(chain.clone());
    let from = now - cfg.slo_window_s;
    let covered = store.first_timestamp(&subj, MetricKind::LatencyMs).is_some_and(|t| t <= from + 1e-9);
    let lat = store.samples(&subj, MetricKind::LatencyMs, from, now);
    let bl = store.samples(&subj, MetricKind::BacklogRequests, from, now);
    let all_over = |s: &[(f64, f64)], thr: f64| !s.is_empty() && s.iter().all(|(_, v)| *v > thr);
    let mean = |s: &[(f64, f64)]| (!s.is_empty()).then(|| s.iter().map(|(_, v)| v).sum::<f64>() / s.len() as f64);
    SloStatus {
        violated: covered && (all_over(lat, cfg.slo_latency_ms) || all_over(bl, cfg.slo_backlog)),
        covered,
        latency_ms: mean(lat),
        backlog: mean(bl),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComputeFlag {
    pub instance: InstanceId,
    pub reason: &'static str,
    pub cpu: f64,
    /// No baseline window existed; only the level test applied.
    pub low_confidence: bool,
}

fn window_mean(store: &MetricStore, subj: &SubjectId, kind: MetricKind, end: f64, len: f64) -> Option<f64> {
    store.aggregate_range(subj, kind, end - len, end, crate::telemetry::Aggregation::Mean)
}

/// Flag instances whose per-packet time grew by `delta_compute`, or whose
/// CPU or memory is above `alpha` and grew by `beta`, comparing the current
/// window with the one ending at `baseline_end`.
pub fn detect_compute_bottlenecks(
    store: &MetricStore,
    instances: &[InstanceId],
    cfg: &ProvisioningConfig,
    now: f64,
    baseline_end: f64,
) -> Vec<ComputeFlag> {
    let w = cfg.slo_window_s;
    let mut out = Vec::new();
    for &i in instances {
        let subj = SubjectId::Instance(i);
        let cur = |k| window_mean(store, &subj, k, now, w);
        let base = |k| window_mean(store, &subj, k, baseline_end, w);
        let cpu = cur(MetricKind::CpuFrac).unwrap_or(0.0);
        let has_base = base(MetricKind::CpuFrac).is_some();
        let mut reason = None;
        if let (Some(p), Some(pb)) = (cur(MetricKind::PerPacketTimeUs), base(MetricKind::PerPacketTimeUs)) {
            if pb > 0.0 && p >= cfg.delta_compute * pb {
                reason = Some("per_packet_time");
            }
        }
        for (kind, name) in [(MetricKind::CpuFrac, "cpu"), (MetricKind::MemFrac, "mem")] {
            if reason.is_some() {
                break;
            }
            let Some(v) = cur(kind) else { continue };
            let grew = match base(kind) {
                Some(b) => v >= cfg.beta * b,
                None => true,
            };
            if v >= cfg.alpha && grew {
                reason = Some(name);
            }
        }
        if let Some(reason) = reason {
            out.push(ComputeFlag { instance: i, reason, cpu, low_confidence: !has_base });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CongestedLink {
    pub from: InstanceId,
    pub to: InstanceId,
    pub min_available: f64,
    pub bottleneck: LinkId,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkReport {
    pub congested: Vec<CongestedLink>,
    /// Number of congested virtual links incident on each instance.
    pub incident: BTreeMap<InstanceId, usize>,
}

/// Virtual links carrying flow whose tightest physical link has less than
/// `delta_net` Mbps available.
pub fn detect_network_bottlenecks(
    topo: &DataCenterTopology,
    placement: &Placement,
    dist: &FlowDistribution,
    delta_net: f64,
) -> Result<NetworkReport, ProvisionError> {
    let mut pairs = BTreeSet::new();
    for (k, &v) in &dist.edges {
        if v > 1e-9 {
            pairs.insert((k.from, k.to));
        }
    }
    let mut report = NetworkReport::default();
    for (a, b) in pairs {
        let path = topo.virtual_link_path(placement, a, b)?;
        let Some(&tight) = path.iter().min_by(|x, y| topo.link(**x).available().total_cmp(&topo.link(**y).available()))
        else {
            continue;
        };
        let avail = topo.link(tight).available();
        if avail < delta_net {
            report.congested.push(CongestedLink { from: a, to: b, min_available: avail, bottleneck: tight });
            *report.incident.entry(a).or_default() += 1;
            *report.incident.entry(b).or_default() += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacementChoice {
    pub machine: MachineId,
    pub rack: RackId,
    /// 1: rack hosts a neighbor, 2: within two switch hops of one, 3: anywhere.
    pub tier: u8,
}

/// Placement from slot occupancy alone: the rack with the most free slots,
/// ties to the lowest rack.
pub fn place_by_free_slots(topo: &DataCenterTopology, placement: &Placement) -> Result<PlacementChoice, ProvisionError> {
    let mut best: Option<(u32, RackId, MachineId)> = None;
    for r in &topo.racks {
        let Some(m) = placement.free_machine_in_rack(topo, r.id) else { continue };
        let free: u32 = r.machines.iter().map(|&m| placement.free_slots(m)).sum();
        if best.is_none_or(|(f, _, _)| free > f) {
            best = Some((free, r.id, m));
        }
    }
    let (_, rack, machine) = best.ok_or(ProvisionError::CapacityExhausted)?;
    Ok(PlacementChoice { machine, rack, tier: 3 })
}

/// Tiered placement: the first tier with an admissible rack wins; within it
/// the lowest score wins (unscored candidates last), ties to the lowest rack.
pub fn place_new_instance<S: PartialOrd>(
    topo: &DataCenterTopology,
    placement: &Placement,
    anchors: &BTreeSet<RackId>,
    admissible: impl Fn(MachineId) -> bool,
    mut score: impl FnMut(MachineId) -> Option<S>,
) -> Result<PlacementChoice, ProvisionError> {
    let n = topo.racks.len();
    let tier_of = |r: RackId| -> u8 {
        if anchors.contains(&r) {
            1
        } else if anchors.iter().any(|&a| topo.switch_hops(r, a) <= 2) {
            2
        } else {
            3
        }
    };
    let mut tiers: [Vec<(RackId, MachineId)>; 3] = Default::default();
    let mut any_slot = false;
    for r in (0..n).map(RackId) {
        let Some(m) = placement.free_machine_in_rack(topo, r) else { continue };
        any_slot = true;
        if admissible(m) {
            tiers[usize::from(tier_of(r) - 1)].push((r, m));
        }
    }
    if !any_slot {
        return Err(ProvisionError::CapacityExhausted);
    }
    for (t, cands) in tiers.iter().enumerate() {
        if cands.is_empty() {
            continue;
        }
        let mut best: Option<(usize, Option<S>)> = None;
        for (k, &(_, m)) in cands.iter().enumerate() {
            let s = score(m);
            let better = match (&best, &s) {
                (None, _) => true,
                (Some((_, None)), Some(_)) => true,
                (Some((_, Some(b))), Some(x)) => x < b,
                _ => false,
            };
            if better {
                best = Some((k, s));
            }
        }
        let (k, _) = best.expect("non-empty tier");
        let (rack, machine) = cands[k];
        return Ok(PlacementChoice { machine, rack, tier: t as u8 + 1 });
    }
    Err(ProvisionError::NoFeasibleLocation)
}

/// Placeholder id for hypothetical instances while scoring candidates.
const PROBE: InstanceId = InstanceId(u32::MAX);

/// One tenant's controllable state.
#[derive(Debug, Clone)]
pub struct World {
    pub topology: DataCenterTopology,
    pub placement: Placement,
    pub deployment: Deployment,
    pub forwarding: ForwardingController,
    pub telemetry: MetricStore,
    pub config: ProvisioningConfig,
    pub policy: Policy,
    pub launch_delay_s: f64,
    pub next_instance: u32,
    /// Offered rate per chain at the current tick.
    pub offered: BTreeMap<ChainId, f64>,
    /// New instance → instance it replaces once ready.
    pub replacing: BTreeMap<InstanceId, InstanceId>,
}

impl World {
    /// Link capacity left after background traffic, as the controller sees it.
    /// Link capacity left after background traffic.
    pub fn residual_capacity(&self) -> Vec<f64> {
        self.topology.links.iter().map(|l| (l.capacity - l.background_load).max(0.0)).collect()
    }

    /// Bandwidth the controller plans with: the residual capacity less the
    /// congestion floor, so a solved distribution leaves no virtual link
    /// congested by construction.
    pub fn controller_available(&self) -> Vec<f64> {
        self.residual_capacity().into_iter().map(|a| (a - self.config.delta_net).max(0.0)).collect()
    }

    /// V_c from telemetry, falling back to the current offered rate.
    pub fn measured_demand(&self, now: f64) -> BTreeMap<ChainId, f64> {
        let w = self.config.window();
        self.deployment
            .chains
            .iter()
            .map(|c| {
                let subj = SubjectId::App(c.id.clone());
                let v = if self.telemetry.first_timestamp(&subj, MetricKind::IngressMbps).is_some() {
                    measure_chain_volume(&self.telemetry, &c.id, w, now)
                } else {
                    self.offered.get(&c.id).copied().unwrap_or(0.0)
                };
                (c.id.clone(), v)
            })
            .collect()
    }

    /// Refresh per-stage γ from instance telemetry where it is well defined.
    fn refresh_gains(&mut self, now: f64) {
        let serving = self.deployment.serving_map();
        let w = self.config.window();
        for c in &self.deployment.chains {
            let g = self.deployment.gains.get_mut(&c.id).expect("gains per chain");
            for (j, e) in c.elements.iter().enumerate() {
                let Some(is) = serving.get(e) else { continue };
                if let Some(est) = compute_gain_factor(&self.telemetry, is, w, now) {
                    if !est.degenerate {
                        g[j + 1] = est.gamma;
                    }
                }
            }
        }
    }

    pub fn stages(&self, now: f64) -> Vec<ChainStages> {
        self.deployment.stages(&self.measured_demand(now))
    }

    fn distribute(&self, chains: &[ChainStages], placement: &Placement) -> Result<(FlowDistribution, String), FlowError> {
        let avail = self.controller_available();
        let net = NetworkView { topology: &self.topology, placement, available: &avail, model: self.config.bandwidth_model };
        if self.policy.uniform() {
            return Ok((uniform_distribution(chains, &net)?, String::new()));
        }
        match solve_flow_distribution(chains, &net, self.config.epsilon) {
            Ok(d) => Ok((d, String::new())),
            Err(FlowError::Infeasible { family, .. }) => {
                // Best effort: the largest routable fraction, split the same way.
                let d = solve_max_throughput(chains, &net, &ThroughputOptions::default())?;
                Ok((d, format!("infeasible:{family:?}")))
            }
            Err(e) => Err(e),
        }
    }

    /// Re-solve and install the flow distribution. Returns (before, after, note).
    pub fn redistribute(&mut self, now: f64) -> Result<(f64, f64, String), ProvisionError> {
        self.redistribute_with(now, false)
    }

    /// As `redistribute`; with `keep_on_infeasible` an infeasible solve
    /// leaves the installed distribution in place instead of the best-effort
    /// one.
    pub fn redistribute_with(&mut self, now: f64, keep_on_infeasible: bool) -> Result<(f64, f64, String), ProvisionError> {
        self.refresh_gains(now);
        let chains = self.stages(now);
        let before = self.deployment.distribution.objective;
        let (dist, note) = self.distribute(&chains, &self.placement)?;
        if keep_on_infeasible && !note.is_empty() {
            return Ok((before, before, format!("{note} kept")));
        }
        let after = dist.objective;
        self.install(dist, &chains)?;
        Ok((before, after, note))
    }

    /// Make `dist` the configured distribution and push path weights.
    pub fn install(&mut self, dist: FlowDistribution, chains: &[ChainStages]) -> Result<(), ProvisionError> {
        for c in chains {
            let ranges = self.deployment.subchain_ranges(&c.id);
            let ids = self.forwarding.subchain_ids(&c.id).to_vec();
            for (sc, (a, b)) in ids.iter().zip(ranges) {
                let w = derive_path_weights(&dist, c, a, b);
                self.forwarding.set_weights(sc, &w)?;
            }
        }
        self.deployment.distribution = dist;
        Ok(())
    }

    /// Start a VM for `element` on `machine`; it serves after the launch delay.
    pub fn launch(&mut self, element: &str, machine: MachineId, now: f64) -> Result<InstanceId, ProvisionError> {
        let id = InstanceId(self.next_instance);
        self.placement.place(id, machine)?;
        self.next_instance += 1;
        self.deployment.add_instance(id, element, InstanceState::Booting, now + self.launch_delay_s);
        Ok(id)
    }

    /// Bring booted instances into service; replaced instances start draining.
    pub fn activate_ready(&mut self, now: f64) -> Result<Vec<InstanceId>, ProvisionError> {
        let ready: Vec<InstanceId> = self
            .deployment
            .records
            .iter()
            .filter(|(_, r)| r.state == InstanceState::Booting && r.ready_at <= now + 1e-9)
            .map(|(i, _)| *i)
            .collect();
        for &i in &ready {
            let rec = self.deployment.records.get_mut(&i).expect("record");
            rec.state = InstanceState::Serving;
            let element = rec.element.clone();
            let kind = self.deployment.kind_of(&element);
            self.forwarding.extend_paths_on_provisioning(&element, i, kind, &self.placement)?;
            if let Some(old) = self.replacing.remove(&i) {
                self.retire(old);
            }
        }
        Ok(ready)
    }

    /// Take an instance out of service; it is destroyed once drained.
    pub fn retire(&mut self, i: InstanceId) {
        if let Some(r) = self.deployment.records.get_mut(&i) {
            r.state = InstanceState::Draining;
        }
        self.forwarding.withdraw_instance(i);
    }

    /// Destroy drained instances and free their slots.
    pub fn reap(&mut self) -> Vec<InstanceId> {
        let done: Vec<InstanceId> = self
            .deployment
            .records
            .iter()
            .filter(|(i, r)| r.state == InstanceState::Draining && self.forwarding.is_drained(**i))
            .map(|(i, _)| *i)
            .collect();
        for &i in &done {
            self.placement.remove(i);
            self.forwarding.remove_instance(i);
            self.deployment.records.remove(&i);
        }
        done
    }

    /// Tags one more instance of `element` would consume given `counts`.
    fn path_tags(&self, element: &str, counts: &BTreeMap<String, usize>) -> usize {
        let mut n = 0;
        for scs in self.deployment.subchains.values() {
            for sc in scs.iter().filter(|sc| sc.elements.iter().any(|e| e == element)) {
                let others: usize =
                    sc.elements.iter().filter(|e| *e != element).map(|e| counts.get(e).copied().unwrap_or(0)).product();
                n += 2 * others;
            }
        }
        n
    }

    /// Fail before launching when the new paths would overrun the tenant's
    /// tag space, counting paths still owed to booting instances.
    fn check_tag_budget(&self, element: &str) -> Result<(), ProvisionError> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for r in self.deployment.records.values() {
            if matches!(r.state, InstanceState::Serving | InstanceState::Probation | InstanceState::Draining) {
                *counts.entry(r.element.clone()).or_default() += 1;
            }
        }
        let mut need = self.forwarding.tags.allocated();
        for r in self.deployment.records.values().filter(|r| r.state == InstanceState::Booting) {
            need += self.path_tags(&r.element, &counts);
            *counts.entry(r.element.clone()).or_default() += 1;
        }
        need += self.path_tags(element, &counts);
        if need > TAG_SPACE as usize {
            return Err(ForwardingError::TagSpaceExhausted(self.deployment.tenant.clone()).into());
        }
        Ok(())
    }

    fn anchor_racks(&self, element: &str, exclude: Option<InstanceId>) -> BTreeSet<RackId> {
        let mut out = BTreeSet::new();
        for n in self.deployment.neighbors(element) {
            for i in self.deployment.instances_in(&n, &[InstanceState::Serving, InstanceState::Booting]) {
                if Some(i) != exclude {
                    if let Some(r) = self.placement.rack(&self.topology, i) {
                        out.insert(r);
                    }
                }
            }
        }
        out
    }

    /// Footprint objective if an instance of `element` ran on `machine`
    /// (replacing `replaces`, if given).
    fn probe_objective(&self, element: &str, machine: MachineId, replaces: Option<InstanceId>, now: f64) -> Option<f64> {
        let mut pl = self.placement.clone();
        if let Some(old) = replaces {
            pl.remove(old);
        }
        pl.place(PROBE, machine).ok()?;
        let extra = [(element.to_string(), vec![PROBE])].into();
        let mut chains = self.deployment.stages_with(&self.measured_demand(now), &extra);
        if let Some(old) = replaces {
            for c in &mut chains {
                for s in &mut c.stages {
                    s.retain(|&i| i != old);
                }
            }
        }
        self.distribute(&chains, &pl).ok().map(|(d, _)| d.objective)
    }

    /// Add one instance of `element`, placed by the tiered heuristic.
    pub fn horizontal_scale(&mut self, element: &str, now: f64) -> Result<(InstanceId, PlacementChoice), ProvisionError> {
        if !self.deployment.mboxes.contains_key(element) {
            return Err(ProvisionError::Unknown(format!("middlebox {element}")));
        }
        self.check_tag_budget(element)?;
        let choice = if self.policy.local_only() {
            place_by_free_slots(&self.topology, &self.placement)?
        } else {
            let anchors = self.anchor_racks(element, None);
            place_new_instance(&self.topology, &self.placement, &anchors, |_| true, |m| {
                self.probe_objective(element, m, None, now)
            })?
        };
        let id = self.launch(element, choice.machine, now)?;
        Ok((id, choice))
    }

    /// Move `i` to a rack with enough headroom towards every neighbor
    /// instance. `Ok(None)` when no rack qualifies.
    pub fn migrate_instance(&mut self, i: InstanceId, now: f64) -> Result<Option<(InstanceId, PlacementChoice)>, ProvisionError> {
        let element = self.deployment.element_of(i).ok_or_else(|| ProvisionError::Unknown(i.to_string()))?.to_string();
        let here = self.placement.rack(&self.topology, i).ok_or(TopologyError::MissingPlacement(i))?;
        self.check_tag_budget(&element)?;
        // Bandwidth i currently exchanges with each neighbor instance.
        let mut consumed: BTreeMap<InstanceId, f64> = BTreeMap::new();
        for (k, v) in &self.deployment.distribution.edges {
            if k.from == i {
                *consumed.entry(k.to).or_default() += v;
            } else if k.to == i {
                *consumed.entry(k.from).or_default() += v;
            }
        }
        let peers: Vec<(MachineId, f64)> = self
            .deployment
            .neighbors(&element)
            .iter()
            .flat_map(|n| self.deployment.serving(n))
            .filter_map(|p| Some((self.placement.machine(p)?, self.config.rho * consumed.get(&p).copied().unwrap_or(0.0))))
            .collect();
        let avail = self.controller_available();
        let admissible = |m: MachineId| {
            self.topology.rack_of(m) != here
                && peers.iter().all(|&(p, need)| {
                    let path = self.topology.machine_path(m, p);
                    need <= 0.0 || path.iter().map(|l| avail[l.0]).fold(f64::INFINITY, f64::min) > need
                })
        };
        let anchors = self.anchor_racks(&element, Some(i));
        let choice = match place_new_instance(&self.topology, &self.placement, &anchors, admissible, |m| {
            self.probe_objective(&element, m, Some(i), now)
        }) {
            Ok(c) => c,
            Err(ProvisionError::NoFeasibleLocation) => return Ok(None),
            Err(e) => return Err(e),
        };
        let id = self.launch(&element, choice.machine, now)?;
        self.replacing.insert(id, i);
        Ok(Some((id, choice)))
    }

    /// Serving middlebox instances.
    pub fn middlebox_instances(&self) -> Vec<InstanceId> {
        self.deployment
            .records
            .iter()
            .filter(|(_, r)| r.state == InstanceState::Serving && !self.deployment.is_endpoint(&r.element))
            .map(|(i, _)| *i)
            .collect()
    }
}

/// A withdrawn instance awaiting confirmation that SLOs still hold.
#[derive(Debug, Clone)]
pub struct Probation {
    pub instance: InstanceId,
    pub since: f64,
    pub prior: FlowDistribution,
    prior_chains: Vec<ChainStages>,
}

/// Per-tenant provisioning state machine.
#[derive(Debug, Clone)]
pub struct Engine {
    pub actions: Vec<ActionRecord>,
    step: u64,
    start: Option<f64>,
    episode: Option<f64>,
    last_flowdist: f64,
    last_action: f64,
    settle_until: f64,
    awaiting: BTreeSet<InstanceId>,
    fallback_done: bool,
    unmet_logged: bool,
    probation: Option<Probation>,
}

impl Default for Engine {
    fn default() -> Self {
        Engine {
            actions: Vec::new(),
            step: 0,
            start: None,
            episode: None,
            last_flowdist: f64::NEG_INFINITY,
            last_action: f64::NEG_INFINITY,
            settle_until: f64::NEG_INFINITY,
            awaiting: BTreeSet::new(),
            fallback_done: false,
            unmet_logged: false,
            probation: None,
        }
    }
}

impl Engine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn probation(&self) -> Option<&Probation> {
        self.probation.as_ref()
    }

    /// Log an action taken outside the state machine (e.g. scripted scaling).
    pub fn record(&mut self, w: &World, now: f64, kind: ActionKind, targets: String) {
        let obj = w.deployment.distribution.objective;
        self.log(w, now, kind, targets, obj, obj);
        self.last_action = now;
    }

    /// Hold further decisions until `id` has booted.
    pub fn await_instance(&mut self, id: InstanceId) {
        self.awaiting.insert(id);
    }

    fn log(&mut self, w: &World, now: f64, kind: ActionKind, targets: String, before: f64, after: f64) {
        self.actions.push(ActionRecord {
            step: self.step,
            time: now,
            policy: w.policy,
            kind,
            targets,
            objective_before: before,
            objective_after: after,
        });
    }

    fn flow_dist(&mut self, w: &mut World, now: f64, why: &str) -> Result<(), ProvisionError> {
        // An SLO-driven re-solve that cannot be satisfied is left to the
        // bottleneck stages rather than replaced by a best-effort split.
        let (b, a, note) = w.redistribute_with(now, why == "slo")?;
        let targets = if note.is_empty() { why.to_string() } else { format!("{why} {note}") };
        self.log(w, now, ActionKind::FlowDist, targets, b, a);
        self.last_flowdist = now;
        Ok(())
    }

    /// Launch one instance of `element`, logging a failure as `none`.
    fn scale(&mut self, w: &mut World, element: &str, now: f64) -> Option<InstanceId> {
        match w.horizontal_scale(element, now) {
            Ok((id, _)) => {
                self.awaiting.insert(id);
                Some(id)
            }
            Err(e) => {
                let obj = w.deployment.distribution.objective;
                self.log(w, now, ActionKind::None, format!("{element}: {e}"), obj, obj);
                self.settle_until = now + w.config.slo_window_s;
                None
            }
        }
    }

    /// Advance one tick. Telemetry for `now` must already be recorded.
    pub fn tick(&mut self, w: &mut World, now: f64) -> Result<(), ProvisionError> {
        self.step += 1;
        self.start.get_or_insert(now);
        let ready = w.activate_ready(now)?;
        if !ready.is_empty() {
            for i in &ready {
                self.awaiting.remove(i);
            }
            let names: Vec<String> = ready.iter().map(|i| i.to_string()).collect();
            self.flow_dist(w, now, &format!("ready:{}", names.join(" ")))?;
            self.last_action = now;
            self.settle_until = now + w.config.slo_window_s;
        }
        w.reap();
        if !self.awaiting.is_empty() || now < self.settle_until {
            return Ok(());
        }

        let violated = w.deployment.chains.iter().any(|c| check_slo(&w.telemetry, &c.id, &w.config, now).violated);
        if !violated {
            if self.episode.take().is_some() {
                self.fallback_done = false;
                self.unmet_logged = false;
            }
            return self.quiet(w, now);
        }

        if let Some(p) = self.probation.take() {
            let obj = w.deployment.distribution.objective;
            let i = p.instance;
            if let Some(r) = w.deployment.records.get_mut(&i) {
                r.state = InstanceState::Serving;
            }
            w.forwarding.restore_instance(i);
            w.install(p.prior, &p.prior_chains)?;
            let after = w.deployment.distribution.objective;
            self.log(w, now, ActionKind::Deprovision, format!("restore {i}"), obj, after);
            self.last_action = now;
            self.settle_until = now + w.config.slo_window_s;
            return Ok(());
        }

        let episode = *self.episode.get_or_insert(now);
        if w.policy.flow_dist_first() {
            if self.last_flowdist < episode {
                self.flow_dist(w, now, "slo")?;
                self.last_action = now;
                return Ok(());
            }
            if now - self.last_flowdist < w.config.post_flowdist_wait_s {
                return Ok(());
            }
        }
        self.escalate(w, now, episode - w.config.slo_window_s)
    }

    /// Stages after flow distribution: compute, network, fallback.
    fn escalate(&mut self, w: &mut World, now: f64, baseline_end: f64) -> Result<(), ProvisionError> {
        let obj = w.deployment.distribution.objective;
        let mboxes = w.middlebox_instances();
        let mut flags = detect_compute_bottlenecks(&w.telemetry, &mboxes, &w.config, now, baseline_end);
        if w.policy.local_only() {
            flags.extend(self.access_link_flags(w, &mboxes, now, baseline_end));
        }
        if let Some(f) = flags.iter().max_by(|a, b| a.cpu.total_cmp(&b.cpu).then(b.instance.cmp(&a.instance))) {
            let element = w.deployment.element_of(f.instance).expect("flagged instance").to_string();
            let tag = if f.low_confidence { " low-confidence" } else { "" };
            if let Some(id) = self.scale(w, &element, now) {
                let t = format!("{element}:{id} ({} {}{tag})", f.instance, f.reason);
                self.log(w, now, ActionKind::Scale, t, obj, obj);
                self.last_action = now;
            }
            return Ok(());
        }

        if w.policy.network_stage() {
            let report = detect_network_bottlenecks(&w.topology, &w.placement, &w.deployment.distribution, w.config.delta_net)?;
            let target = report
                .incident
                .iter()
                .filter(|(i, _)| mboxes.contains(i))
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(i, _)| *i);
            if let Some(i) = target {
                let element = w.deployment.element_of(i).expect("instance").to_string();
                match w.migrate_instance(i, now) {
                    Err(e) => {
                        self.log(w, now, ActionKind::None, format!("{element}:{i} migrate: {e}"), obj, obj);
                        self.settle_until = now + w.config.slo_window_s;
                    }
                    Ok(Some((id, c))) => {
                        self.awaiting.insert(id);
                        self.log(w, now, ActionKind::Migrate, format!("{element}:{i}->{id}@{}", c.rack), obj, obj);
                        self.last_action = now;
                    }
                    Ok(None) => {
                        if let Some(id) = self.scale(w, &element, now) {
                            self.log(w, now, ActionKind::Scale, format!("{element}:{id} ({i} migrate infeasible)"), obj, obj);
                            self.last_action = now;
                        }
                    }
                }
                return Ok(());
            }
        }

        if !self.fallback_done {
            self.fallback_done = true;
            let elements: Vec<String> = w.deployment.mboxes.keys().cloned().collect();
            let mut added = Vec::new();
            for e in &elements {
                for _ in 0..w.config.fallback_scale_count {
                    if let Some(id) = self.scale(w, e, now) {
                        added.push(format!("{e}:{id}"));
                    }
                }
            }
            if !added.is_empty() {
                self.log(w, now, ActionKind::FallbackScaleAll, added.join(" "), obj, obj);
                self.last_action = now;
            }
        } else if !self.unmet_logged {
            self.unmet_logged = true;
            self.log(w, now, ActionKind::None, "unmet".into(), obj, obj);
        }
        Ok(())
    }

    /// Access-link utilization of each instance's machine, judged like CPU.
    fn access_link_flags(&self, w: &World, instances: &[InstanceId], now: f64, baseline_end: f64) -> Vec<ComputeFlag> {
        let len = w.config.slo_window_s;
        let mut out = Vec::new();
        for &i in instances {
            let Some(m) = w.placement.machine(i) else { continue };
            let l = w.topology.machines[m.0].access_link;
            let cap = w.topology.link(l).capacity;
            let subj = SubjectId::Link(l);
            let Some(cur) = window_mean(&w.telemetry, &subj, MetricKind::LinkMbps, now, len) else { continue };
            let base = window_mean(&w.telemetry, &subj, MetricKind::LinkMbps, baseline_end, len);
            let u = cur / cap;
            let grew = base.is_none_or(|b| cur >= w.config.beta * b);
            if u >= w.config.alpha && grew {
                out.push(ComputeFlag { instance: i, reason: "access_link", cpu: u, low_confidence: base.is_none() });
            }
        }
        out
    }

    /// SLOs hold: settle a probation or look for an instance to remove.
    fn quiet(&mut self, w: &mut World, now: f64) -> Result<(), ProvisionError> {
        let win = w.config.slo_window_s;
        if let Some(p) = &self.probation {
            // Long enough for one fully covered window after the withdrawal.
            if now - p.since >= 2.0 * win {
                let i = p.instance;
                self.probation = None;
                w.retire(i);
                let obj = w.deployment.distribution.objective;
                self.log(w, now, ActionKind::Deprovision, format!("commit {i}"), obj, obj);
                self.last_action = now;
            }
            return Ok(());
        }
        let start = self.start.unwrap_or(now);
        if now - self.last_action < 2.0 * win || now - start < 2.0 * win {
            return Ok(());
        }
        // A queue means low per-packet times may reflect starved instances.
        let queued = w.deployment.chains.iter().any(|c| {
            w.telemetry
                .aggregate_range(&SubjectId::App(c.id.clone()), MetricKind::BacklogRequests, now - 2.0 * win, now, crate::telemetry::Aggregation::Max)
                .is_some_and(|b| b > 0.0)
        });
        if queued {
            return Ok(());
        }
        let serving = w.deployment.serving_map();
        let mut cand: Option<(f64, InstanceId)> = None;
        for (e, is) in &serving {
            if w.deployment.is_endpoint(e) || is.len() < 2 {
                continue;
            }
            // The rest of the position must absorb the load below alpha.
            let total: f64 = is
                .iter()
                .map(|&i| window_mean(&w.telemetry, &SubjectId::Instance(i), MetricKind::IngressMbps, now, win).unwrap_or(0.0))
                .sum();
            let cap = w.deployment.capacity_of(e).unwrap_or(f64::INFINITY);
            if total > w.config.alpha * cap * (is.len() - 1) as f64 {
                continue;
            }
            for &i in is {
                let subj = SubjectId::Instance(i);
                let cur = window_mean(&w.telemetry, &subj, MetricKind::PerPacketTimeUs, now, win);
                let base = window_mean(&w.telemetry, &subj, MetricKind::PerPacketTimeUs, now - win, win);
                if let (Some(c), Some(b)) = (cur, base) {
                    if b > 0.0 && c <= w.config.delta_deprov * b {
                        let cpu = window_mean(&w.telemetry, &subj, MetricKind::CpuFrac, now, win).unwrap_or(0.0);
                        if cand.is_none_or(|(best, id)| cpu < best || (cpu == best && i < id)) {
                            cand = Some((cpu, i));
                        }
                    }
                }
            }
        }
        let Some((_, i)) = cand else { return Ok(()) };
        let prior = w.deployment.distribution.clone();
        let prior_chains = w.stages(now);
        if let Some(r) = w.deployment.records.get_mut(&i) {
            r.state = InstanceState::Probation;
        }
        w.forwarding.withdraw_instance(i);
        let (b, a, _) = w.redistribute(now)?;
        self.log(w, now, ActionKind::Deprovision, format!("probation {i}"), b, a);
        self.last_action = now;
        self.probation = Some(Probation { instance: i, since: now, prior, prior_chains });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_tree_topology, TopologySpec};

    #[test]
    fn config_defaults_validate() {
        ProvisioningConfig::default().validate().unwrap();
        let bad = ProvisioningConfig { beta: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ProvisioningConfig { delta_deprov: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ProvisioningConfig { alpha: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert_eq!("UniformFlow".parse::<Policy>().unwrap(), Policy::Uniformflow);
        assert!("greedy".parse::<Policy>().is_err());
    }

    fn series(store: &mut MetricStore, subj: SubjectId, kind: MetricKind, f: impl Fn(f64) -> f64) {
        for t in 0..=30 {
            store.put(subj.clone(), kind, t as f64, f(t as f64)).unwrap();
        }
    }

    #[test]
    fn slo_needs_every_sample_over() {
        let cfg = ProvisioningConfig::default();
        let c = ChainId("c".into());
        let mut s = MetricStore::new();
        series(&mut s, SubjectId::App(c.clone()), MetricKind::LatencyMs, |t| if t >= 15.0 { 60.0 } else { 10.0 });
        series(&mut s, SubjectId::App(c.clone()), MetricKind::BacklogRequests, |_| 0.0);
        assert!(!check_slo(&s, &c, &cfg, 20.0).violated);
        assert!(check_slo(&s, &c, &cfg, 25.0).violated);
        // Not enough history yet.
        assert!(!check_slo(&s, &c, &cfg, 5.0).covered);
    }

    #[test]
    fn compute_detection_rules() {
        let cfg = ProvisioningConfig::default();
        let mut s = MetricStore::new();
        // i0 saturates at t=15; i1 polls at 100% throughout; i2 stays idle.
        let hot = |t: f64| if t > 15.0 { 0.97 } else { 0.5 };
        series(&mut s, SubjectId::Instance(InstanceId(0)), MetricKind::CpuFrac, hot);
        series(&mut s, SubjectId::Instance(InstanceId(0)), MetricKind::PerPacketTimeUs, |t| 10.0 / (1.0 - hot(t)));
        series(&mut s, SubjectId::Instance(InstanceId(1)), MetricKind::CpuFrac, |_| 1.0);
        series(&mut s, SubjectId::Instance(InstanceId(1)), MetricKind::PerPacketTimeUs, |_| 12.0);
        series(&mut s, SubjectId::Instance(InstanceId(2)), MetricKind::CpuFrac, |_| 0.2);
        let ids = [InstanceId(0), InstanceId(1), InstanceId(2)];
        let f = detect_compute_bottlenecks(&s, &ids, &cfg, 28.0, 15.0);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].instance, InstanceId(0));
        assert!(!f[0].low_confidence);

        // With no baseline the level test alone applies.
        let f = detect_compute_bottlenecks(&s, &ids, &cfg, 28.0, -50.0);
        assert!(f.iter().any(|x| x.instance == InstanceId(1) && x.low_confidence));
    }

    #[test]
    fn tiers_prefer_neighbors_then_lowest_rack() {
        let topo = build_tree_topology(&TopologySpec::new(8, 1, 2).with_fanouts(4, 2)).unwrap();
        let mut pl = Placement::new(&topo);
        let anchors: BTreeSet<RackId> = [RackId(5)].into();
        let c = place_new_instance(&topo, &pl, &anchors, |_| true, |_| Some(0.0)).unwrap();
        assert_eq!((c.rack, c.tier), (RackId(5), 1));
        pl.place(InstanceId(0), MachineId(5)).unwrap();
        pl.place(InstanceId(1), MachineId(5)).unwrap();
        let c = place_new_instance(&topo, &pl, &anchors, |_| true, |_| Some(0.0)).unwrap();
        assert_eq!((c.rack, c.tier), (RackId(4), 2));
        let c = place_new_instance(&topo, &pl, &anchors, |_| true, |m| Some(-(m.0 as f64))).unwrap();
        assert_eq!(c.rack, RackId(7));
        let c = place_new_instance(&topo, &pl, &anchors, |m| topo.rack_of(m).0 < 4, |_| Some(0.0)).unwrap();
        assert_eq!((c.rack, c.tier), (RackId(0), 3));
        assert!(matches!(
            place_new_instance(&topo, &pl, &anchors, |_| false, |_| Some(0.0)),
            Err(ProvisionError::NoFeasibleLocation)
        ));
        let mut full = Placement::new(&topo);
        for m in 0..8 {
            full.place(InstanceId(2 * m), MachineId(m as usize)).unwrap();
            full.place(InstanceId(2 * m + 1), MachineId(m as usize)).unwrap();
        }
        assert!(matches!(
            place_new_instance(&topo, &full, &anchors, |_| true, |_| Some(0.0)),
            Err(ProvisionError::CapacityExhausted)
        ));
    }

    #[test]
    fn action_csv_header() {
        let a = ActionRecord {
            step: 3,
            time: 12.0,
            policy: Policy::Stratos,
            kind: ActionKind::FallbackScaleAll,
            targets: "A:i4, B:i5".into(),
            objective_before: 1.0,
            objective_after: 2.5,
        };
        let csv = actions_to_csv(&[a]);
        assert_eq!(
            csv,
            "step,time,policy,kind,targets,objective_before,objective_after\n3,12.000,stratos,fallback_scale_all,A:i4; B:i5,1.000000,2.500000\n"
        );
    }
}
