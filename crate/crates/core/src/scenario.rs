//! TOML scenario files: topology, middleboxes, chains, initial placement,
//! workload and background timelines, policy and engine parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{validate_chains, ChainId, LogicalChain, MBoxSpec};
use crate::deploy::EndpointSpec;
use crate::provisioning::{Policy, ProvisioningConfig};
use crate::topology::{build_tree_topology, DataCenterTopology, MachineId, Placement, RackId, TopologySpec};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{key}: {msg}")]
    Invalid { key: String, msg: String },
}

fn invalid(key: impl Into<String>, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { key: key.into(), msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MBoxEntry {
    pub name: String,
    pub capacity_mbps: f64,
    /// Ingress over egress volume.
    #[serde(default = "unit")]
    pub gain: f64,
    #[serde(default)]
    pub mangling: bool,
    /// Busy-polls, so CPU reads 100% regardless of load.
    #[serde(default)]
    pub polling: bool,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainEntry {
    pub id: String,
    pub source: String,
    pub elements: Vec<String>,
    pub sink: String,
}

/// Initial instances of one element. Without `rack` or `machine` they are
/// placed on seeded-random racks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceEntry {
    pub element: String,
    #[serde(default = "one")]
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rack: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub machine: Option<usize>,
}

fn one() -> usize {
    1
}

/// Offered load of a chain from `time_s` until the next point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadPoint {
    pub time_s: f64,
    pub chain: String,
    pub mbps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundFlow {
    pub time_s: f64,
    pub racks: [usize; 2],
    pub mbps: f64,
    pub duration_s: f64,
}

impl BackgroundFlow {
    pub fn active(&self, t: f64) -> bool {
        t >= self.time_s && t < self.time_s + self.duration_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    /// Seconds from launching a VM until it carries traffic.
    pub launch_delay_s: f64,
    /// Request size used to express backlog in requests.
    pub request_mbit: f64,
    /// Chain latency at zero utilization.
    pub base_latency_ms: f64,
    pub base_packet_time_us: f64,
    /// Flows admitted per chain per tick through the forwarding plane.
    pub flows_per_tick: usize,
    pub flow_lifetime_s: f64,
    /// Keep the full metric store for `metrics.csv`.
    pub record_metrics: bool,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            launch_delay_s: 35.0,
            request_mbit: 0.8,
            base_latency_ms: 2.0,
            base_packet_time_us: 10.0,
            flows_per_tick: 2,
            flow_lifetime_s: 8.0,
            record_metrics: false,
        }
    }
}

/// Scale the middleboxes round-robin on a fixed schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedScaling {
    pub interval_s: f64,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "unit")]
    pub tick_s: f64,
    #[serde(default = "default_policy")]
    pub policy: Policy,
    pub topology: TopologySpec,
    #[serde(default)]
    pub sim: SimParams,
    #[serde(default)]
    pub provisioning: ProvisioningConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scripted_scaling: Option<ScriptedScaling>,
    #[serde(rename = "mbox", default)]
    pub mboxes: Vec<MBoxEntry>,
    #[serde(rename = "endpoint", default)]
    pub endpoints: Vec<EndpointSpec>,
    #[serde(rename = "chain")]
    pub chains: Vec<ChainEntry>,
    #[serde(rename = "instance", default)]
    pub instances: Vec<InstanceEntry>,
    #[serde(rename = "workload", default)]
    pub workload: Vec<WorkloadPoint>,
    #[serde(rename = "background", default)]
    pub background: Vec<BackgroundFlow>,
}

fn default_policy() -> Policy {
    Policy::Stratos
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn mbox_specs(&self) -> BTreeMap<String, MBoxSpec> {
        self.mboxes
            .iter()
            .map(|m| {
                let mut s = MBoxSpec::new(&m.name, m.capacity_mbps).with_gain(m.gain);
                s.is_mangling = m.mangling;
                (m.name.clone(), s)
            })
            .collect()
    }

    pub fn logical_chains(&self) -> Vec<LogicalChain> {
        self.chains
            .iter()
            .map(|c| {
                let els: Vec<&str> = c.elements.iter().map(String::as_str).collect();
                LogicalChain::new(&c.id, &c.source, &els, &c.sink)
            })
            .collect()
    }

    /// Every source and sink, with declared limits where given.
    pub fn endpoint_specs(&self) -> BTreeMap<String, EndpointSpec> {
        let mut out: BTreeMap<String, EndpointSpec> = BTreeMap::new();
        for c in &self.chains {
            for n in [&c.source, &c.sink] {
                out.entry(n.clone()).or_insert_with(|| EndpointSpec { name: n.clone(), capacity_mbps: None });
            }
        }
        for e in &self.endpoints {
            out.insert(e.name.clone(), e.clone());
        }
        out
    }

    /// Offered Mbps of `chain` at time `t` (step function, 0 before the first point).
    pub fn offered(&self, chain: &str, t: f64) -> f64 {
        self.workload
            .iter()
            .filter(|w| w.chain == chain && w.time_s <= t + 1e-9)
            .max_by(|a, b| a.time_s.total_cmp(&b.time_s))
            .map(|w| w.mbps)
            .unwrap_or(0.0)
    }

    pub fn background_at(&self, t: f64) -> Vec<(RackId, RackId, f64)> {
        self.background.iter().filter(|b| b.active(t)).map(|b| (RackId(b.racks[0]), RackId(b.racks[1]), b.mbps)).collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let t = &self.topology;
        if t.racks == 0 || t.machines_per_rack == 0 || t.slots_per_machine == 0 {
            return Err(invalid("topology", "racks, machines_per_rack and slots_per_machine must be positive"));
        }
        if !(t.link_capacity > 0.0) {
            return Err(invalid("topology.link_capacity_mbps", "must be positive"));
        }
        if t.agg_fanout == 0 || t.core_fanout == 0 {
            return Err(invalid("topology", "fanouts must be positive"));
        }
        if !(self.duration_s > 0.0) {
            return Err(invalid("duration_s", "must be positive"));
        }
        if !(self.tick_s > 0.0) {
            return Err(invalid("tick_s", "must be positive"));
        }
        self.provisioning.validate().map_err(|e| invalid("provisioning", e.to_string()))?;
        let p = &self.sim;
        if !(p.launch_delay_s >= 0.0 && p.request_mbit > 0.0 && p.base_latency_ms > 0.0 && p.base_packet_time_us > 0.0) {
            return Err(invalid("sim", "delays must be non-negative and sizes positive"));
        }
        if !(p.flow_lifetime_s > 0.0) {
            return Err(invalid("sim.flow_lifetime_s", "must be positive"));
        }
        if self.chains.is_empty() {
            return Err(invalid("chain", "at least one chain is required"));
        }
        let mboxes = self.mbox_specs();
        if mboxes.len() != self.mboxes.len() {
            return Err(invalid("mbox", "duplicate middlebox name"));
        }
        for (k, m) in self.mboxes.iter().enumerate() {
            mboxes[&m.name].validate().map_err(|e| invalid(format!("mbox[{k}]"), e.to_string()))?;
        }
        validate_chains(&self.logical_chains(), &mboxes).map_err(|e| invalid("chain", e.to_string()))?;
        let endpoints = self.endpoint_specs();
        for (k, e) in self.endpoints.iter().enumerate() {
            if mboxes.contains_key(&e.name) {
                return Err(invalid(format!("endpoint[{k}].name"), format!("{} is a middlebox", e.name)));
            }
            if e.capacity_mbps.is_some_and(|c| !(c > 0.0)) {
                return Err(invalid(format!("endpoint[{k}].capacity_mbps"), "must be positive"));
            }
        }
        let chain_ids: BTreeSet<&str> = self.chains.iter().map(|c| c.id.as_str()).collect();
        let mut placed: BTreeSet<&str> = BTreeSet::new();
        for (k, i) in self.instances.iter().enumerate() {
            let key = format!("instance[{k}]");
            if !mboxes.contains_key(&i.element) && !endpoints.contains_key(&i.element) {
                return Err(invalid(format!("{key}.element"), format!("unknown element {}", i.element)));
            }
            if i.count == 0 {
                return Err(invalid(format!("{key}.count"), "must be positive"));
            }
            if i.rack.is_some() && i.machine.is_some() {
                return Err(invalid(key, "give rack or machine, not both"));
            }
            if i.rack.is_some_and(|r| r >= t.racks) {
                return Err(invalid(format!("{key}.rack"), "out of range"));
            }
            if i.machine.is_some_and(|m| m >= t.racks * t.machines_per_rack) {
                return Err(invalid(format!("{key}.machine"), "out of range"));
            }
            placed.insert(&i.element);
        }
        for c in &self.chains {
            for e in std::iter::once(&c.source).chain(&c.elements).chain(std::iter::once(&c.sink)) {
                if !placed.contains(e.as_str()) {
                    return Err(invalid("instance", format!("element {e} of chain {} has no initial instance", c.id)));
                }
            }
        }
        for (k, w) in self.workload.iter().enumerate() {
            if !chain_ids.contains(w.chain.as_str()) {
                return Err(invalid(format!("workload[{k}].chain"), format!("unknown chain {}", w.chain)));
            }
            if !(w.time_s >= 0.0 && w.mbps >= 0.0 && w.mbps.is_finite()) {
                return Err(invalid(format!("workload[{k}]"), "time and rate must be non-negative"));
            }
        }
        for (k, b) in self.background.iter().enumerate() {
            if b.racks.iter().any(|&r| r >= t.racks) {
                return Err(invalid(format!("background[{k}].racks"), "out of range"));
            }
            if !(b.time_s >= 0.0 && b.mbps >= 0.0 && b.duration_s > 0.0) {
                return Err(invalid(format!("background[{k}]"), "time, rate and duration must be non-negative"));
            }
        }
        if let Some(s) = &self.scripted_scaling {
            if !(s.interval_s > 0.0) {
                return Err(invalid("scripted_scaling.interval_s", "must be positive"));
            }
        }
        build_tree_topology(t).map_err(|e| invalid("topology", e.to_string()))?;
        Ok(())
    }
}

/// Where each initial instance of an element lands.
pub fn resolve_placements(
    scenario: &Scenario,
    topo: &DataCenterTopology,
    seed: u64,
) -> Result<Vec<(String, MachineId)>, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pl = Placement::new(topo);
    let mut out = Vec::new();
    let mut next = 0u32;
    for (k, e) in scenario.instances.iter().enumerate() {
        for _ in 0..e.count {
            let m = match (e.rack, e.machine) {
                (_, Some(m)) => MachineId(m),
                (Some(r), None) => pl
                    .free_machine_in_rack(topo, RackId(r))
                    .ok_or_else(|| invalid(format!("instance[{k}].rack"), format!("rack {r} has no free slot")))?,
                (None, None) => {
                    let open: Vec<MachineId> =
                        (0..topo.racks.len()).filter_map(|r| pl.free_machine_in_rack(topo, RackId(r))).collect();
                    if open.is_empty() {
                        return Err(invalid(format!("instance[{k}]"), "no free slot left"));
                    }
                    open[rng.gen_range(0..open.len())]
                }
            };
            pl.place(crate::topology::InstanceId(next), m)
                .map_err(|err| invalid(format!("instance[{k}]"), err.to_string()))?;
            next += 1;
            out.push((e.element.clone(), m));
        }
    }
    Ok(out)
}

/// The scenario with overrides applied plus the resolved initial placement.
pub fn resolved_config(scenario: &Scenario, placements: &[(String, MachineId)], topo: &DataCenterTopology) -> String {
    #[derive(Serialize)]
    struct Resolved<'a> {
        element: &'a str,
        machine: usize,
        rack: usize,
    }
    #[derive(Serialize)]
    struct Dump<'a> {
        resolved_instance: Vec<Resolved<'a>>,
    }
    let dump = Dump {
        resolved_instance: placements
            .iter()
            .map(|(e, m)| Resolved { element: e, machine: m.0, rack: topo.rack_of(*m).0 })
            .collect(),
    };
    let mut s = scenario.to_toml();
    s.push('\n');
    s.push_str(&toml::to_string(&dump).expect("placement serializes"));
    s
}

/// Chain ids as the simulator keys them.
pub fn chain_ids(scenario: &Scenario) -> Vec<ChainId> {
    scenario.chains.iter().map(|c| ChainId(c.id.clone())).collect()
}
