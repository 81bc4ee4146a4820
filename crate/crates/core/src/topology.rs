//! Physical data-center model: racks, machines with VM slots, a ToR/Agg/Core
//! switch tree and capacity-bearing links.
//!
//! Every machine hangs off its rack's ToR switch through its own access link,
//! ToR switches hang off aggregation switches and aggregation switches hang off
//! core switches. When more than one core switch is needed the extra cores are
//! attached to core 0 so the link graph stays a tree and every rack pair has
//! exactly one path.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

macro_rules! id_type {
    ($name:ident, $inner:ty, $prefix:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(RackId, usize, "r");
id_type!(MachineId, usize, "m");
id_type!(SwitchId, usize, "s");
id_type!(LinkId, usize, "l");
id_type!(InstanceId, u32, "i");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("invalid topology spec: {0}")]
    InvalidSpec(String),
    #[error("instance {0} is not placed")]
    MissingPlacement(InstanceId),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("machine {0} has no free VM slot")]
    SlotsFull(MachineId),
    #[error("instance {0} is already placed")]
    AlreadyPlaced(InstanceId),
    #[error("unknown {0}")]
    Unknown(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Tor,
    Agg,
    Core,
}

/// A link endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    Machine(MachineId),
    Switch(SwitchId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalLink {
    pub id: LinkId,
    pub endpoints: (Node, Node),
    pub capacity: f64,
    pub background_load: f64,
    pub chain_load: f64,
}

impl PhysicalLink {
    pub fn available(&self) -> f64 {
        (self.capacity - self.background_load - self.chain_load).max(0.0)
    }

    pub fn utilization(&self) -> f64 {
        (self.background_load + self.chain_load) / self.capacity
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Machine {
    pub id: MachineId,
    pub rack: RackId,
    pub vm_slots: u32,
    pub access_link: LinkId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Switch {
    pub id: SwitchId,
    pub tier: Tier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rack {
    pub id: RackId,
    pub tor: SwitchId,
    pub machines: Vec<MachineId>,
    /// Switches from the ToR up to the root, inclusive.
    ancestors: Vec<SwitchId>,
    /// `up_links[k]` connects `ancestors[k]` to `ancestors[k + 1]`.
    up_links: Vec<LinkId>,
}

/// Shape of a generated tree topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub racks: usize,
    #[serde(default = "one")]
    pub machines_per_rack: usize,
    pub slots_per_machine: u32,
    #[serde(default = "default_agg_fanout")]
    pub agg_fanout: usize,
    #[serde(default = "default_core_fanout")]
    pub core_fanout: usize,
    #[serde(default = "default_link_capacity", rename = "link_capacity_mbps")]
    pub link_capacity: f64,
}

fn one() -> usize {
    1
}
fn default_agg_fanout() -> usize {
    25
}
fn default_core_fanout() -> usize {
    20
}
fn default_link_capacity() -> f64 {
    1000.0
}

impl TopologySpec {
    pub fn new(racks: usize, machines_per_rack: usize, slots_per_machine: u32) -> Self {
        TopologySpec {
            racks,
            machines_per_rack,
            slots_per_machine,
            agg_fanout: default_agg_fanout(),
            core_fanout: default_core_fanout(),
            link_capacity: default_link_capacity(),
        }
    }

    pub fn with_fanouts(mut self, agg_fanout: usize, core_fanout: usize) -> Self {
        self.agg_fanout = agg_fanout;
        self.core_fanout = core_fanout;
        self
    }

    pub fn with_link_capacity(mut self, mbps: f64) -> Self {
        self.link_capacity = mbps;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataCenterTopology {
    pub racks: Vec<Rack>,
    pub machines: Vec<Machine>,
    pub switches: Vec<Switch>,
    pub links: Vec<PhysicalLink>,
    agg_of_rack: Vec<SwitchId>,
}

pub fn build_tree_topology(spec: &TopologySpec) -> Result<DataCenterTopology, TopologyError> {
    if spec.racks == 0 {
        return Err(TopologyError::InvalidSpec("zero racks".into()));
    }
    if spec.machines_per_rack == 0 {
        return Err(TopologyError::InvalidSpec("zero machines per rack".into()));
    }
    if spec.slots_per_machine == 0 {
        return Err(TopologyError::InvalidSpec("zero VM slots per machine".into()));
    }
    if spec.agg_fanout == 0 || spec.core_fanout == 0 {
        return Err(TopologyError::InvalidSpec("fanouts must be at least 1".into()));
    }
    if !(spec.link_capacity > 0.0 && spec.link_capacity.is_finite()) {
        return Err(TopologyError::InvalidSpec("link capacity must be positive".into()));
    }

    let n_agg = spec.racks.div_ceil(spec.agg_fanout);
    let n_core = n_agg.div_ceil(spec.core_fanout);

    let mut switches = Vec::new();
    for r in 0..spec.racks {
        switches.push(Switch { id: SwitchId(r), tier: Tier::Tor });
    }
    let agg_base = spec.racks;
    for a in 0..n_agg {
        switches.push(Switch { id: SwitchId(agg_base + a), tier: Tier::Agg });
    }
    let core_base = agg_base + n_agg;
    for c in 0..n_core {
        switches.push(Switch { id: SwitchId(core_base + c), tier: Tier::Core });
    }

    let mut links: Vec<PhysicalLink> = Vec::new();
    let mut add_link = |a: Node, b: Node| {
        let id = LinkId(links.len());
        links.push(PhysicalLink {
            id,
            endpoints: (a, b),
            capacity: spec.link_capacity,
            background_load: 0.0,
            chain_load: 0.0,
        });
        id
    };

    let mut machines = Vec::new();
    for r in 0..spec.racks {
        for k in 0..spec.machines_per_rack {
            let id = MachineId(r * spec.machines_per_rack + k);
            let access_link = add_link(Node::Machine(id), Node::Switch(SwitchId(r)));
            machines.push(Machine { id, rack: RackId(r), vm_slots: spec.slots_per_machine, access_link });
        }
    }
    let tor_up: Vec<LinkId> = (0..spec.racks)
        .map(|r| add_link(Node::Switch(SwitchId(r)), Node::Switch(SwitchId(agg_base + r / spec.agg_fanout))))
        .collect();
    let agg_up: Vec<LinkId> = (0..n_agg)
        .map(|a| {
            add_link(
                Node::Switch(SwitchId(agg_base + a)),
                Node::Switch(SwitchId(core_base + a / spec.core_fanout)),
            )
        })
        .collect();
    let core_up: Vec<Option<LinkId>> = (0..n_core)
        .map(|c| (c > 0).then(|| add_link(Node::Switch(SwitchId(core_base + c)), Node::Switch(SwitchId(core_base)))))
        .collect();

    let mut racks = Vec::new();
    let mut agg_of_rack = Vec::new();
    for r in 0..spec.racks {
        let agg = r / spec.agg_fanout;
        let core = agg / spec.core_fanout;
        let mut ancestors = vec![SwitchId(r), SwitchId(agg_base + agg), SwitchId(core_base + core)];
        let mut up_links = vec![tor_up[r], agg_up[agg]];
        if let Some(l) = core_up[core] {
            ancestors.push(SwitchId(core_base));
            up_links.push(l);
        }
        agg_of_rack.push(SwitchId(agg_base + agg));
        racks.push(Rack {
            id: RackId(r),
            tor: SwitchId(r),
            machines: (0..spec.machines_per_rack).map(|k| MachineId(r * spec.machines_per_rack + k)).collect(),
            ancestors,
            up_links,
        });
    }

    Ok(DataCenterTopology { racks, machines, switches, links, agg_of_rack })
}

impl DataCenterTopology {
    pub fn rack_of(&self, machine: MachineId) -> RackId {
        self.machines[machine.0].rack
    }

    pub fn agg_of(&self, rack: RackId) -> SwitchId {
        self.agg_of_rack[rack.0]
    }

    pub fn link(&self, id: LinkId) -> &PhysicalLink {
        &self.links[id.0]
    }

    pub fn switch_count(&self, tier: Tier) -> usize {
        self.switches.iter().filter(|s| s.tier == tier).count()
    }

    pub fn total_slots(&self) -> u64 {
        self.machines.iter().map(|m| m.vm_slots as u64).sum()
    }

    /// The unique rack-to-rack path (ToR and above). Empty for `r == r2`.
    pub fn routing(&self, r: RackId, r2: RackId) -> Vec<LinkId> {
        if r == r2 {
            return Vec::new();
        }
        let a = &self.racks[r.0];
        let b = &self.racks[r2.0];
        // First ancestor of `a` that `b` also has.
        let (ia, ib) = a
            .ancestors
            .iter()
            .enumerate()
            .find_map(|(ia, s)| b.ancestors.iter().position(|t| t == s).map(|ib| (ia, ib)))
            .expect("tree has a single root");
        let mut path: Vec<LinkId> = a.up_links[..ia].to_vec();
        path.extend(b.up_links[..ib].iter().rev());
        path
    }

    /// Number of switch-to-switch hops a packet crosses between two racks' ToRs.
    pub fn switch_hops(&self, r: RackId, r2: RackId) -> usize {
        self.routing(r, r2).len()
    }

    pub fn machine_path(&self, m: MachineId, m2: MachineId) -> Vec<LinkId> {
        if m == m2 {
            return Vec::new();
        }
        let mut path = vec![self.machines[m.0].access_link];
        path.extend(self.routing(self.rack_of(m), self.rack_of(m2)));
        path.push(self.machines[m2.0].access_link);
        path
    }

    /// The physical path underlying the virtual link between two placed instances.
    pub fn virtual_link_path(
        &self,
        placement: &Placement,
        i: InstanceId,
        i2: InstanceId,
    ) -> Result<Vec<LinkId>, TopologyError> {
        let m = placement.machine(i).ok_or(TopologyError::MissingPlacement(i))?;
        let m2 = placement.machine(i2).ok_or(TopologyError::MissingPlacement(i2))?;
        Ok(self.machine_path(m, m2))
    }

    /// b(r, r2): the smallest residual capacity on the rack path, infinite intra-rack.
    pub fn available_bandwidth(&self, r: RackId, r2: RackId) -> f64 {
        self.routing(r, r2)
            .iter()
            .map(|l| self.links[l.0].available())
            .fold(f64::INFINITY, f64::min)
    }

    /// Replace all chain loads with the given rack-to-rack volumes.
    pub fn apply_traffic(&mut self, assignments: &[(RackId, RackId, f64)]) -> Result<(), TopologyError> {
        let mut paths = Vec::with_capacity(assignments.len());
        for &(r, r2, v) in assignments {
            self.check_rack(r)?;
            self.check_rack(r2)?;
            paths.push((self.routing(r, r2), v));
        }
        self.apply_path_traffic(paths)
    }

    /// Replace all chain loads with volumes carried over explicit link paths.
    pub fn apply_path_traffic<I, P>(&mut self, assignments: I) -> Result<(), TopologyError>
    where
        I: IntoIterator<Item = (P, f64)>,
        P: AsRef<[LinkId]>,
    {
        let mut loads = vec![0.0; self.links.len()];
        for (path, v) in assignments {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TopologyError::InvalidInput(format!("volume {v} must be non-negative")));
            }
            for l in path.as_ref() {
                loads[l.0] += v;
            }
        }
        for (link, load) in self.links.iter_mut().zip(loads) {
            link.chain_load = load;
        }
        Ok(())
    }

    /// Replace all background loads.
    pub fn set_background(&mut self, flows: &[(RackId, RackId, f64)]) -> Result<(), TopologyError> {
        let mut loads = vec![0.0; self.links.len()];
        for &(r, r2, v) in flows {
            self.check_rack(r)?;
            self.check_rack(r2)?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TopologyError::InvalidInput(format!("background volume {v} must be non-negative")));
            }
            for l in self.routing(r, r2) {
                loads[l.0] += v;
            }
        }
        for (link, load) in self.links.iter_mut().zip(loads) {
            link.background_load = load;
        }
        Ok(())
    }

    pub fn check_rack(&self, r: RackId) -> Result<(), TopologyError> {
        if r.0 < self.racks.len() {
            Ok(())
        } else {
            Err(TopologyError::Unknown(format!("rack {r}")))
        }
    }

    pub fn available_per_link(&self) -> Vec<f64> {
        self.links.iter().map(PhysicalLink::available).collect()
    }
}

/// Instance → machine mapping with per-machine slot accounting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Placement {
    machine_of: BTreeMap<InstanceId, MachineId>,
    occupied: Vec<u32>,
    slots: Vec<u32>,
}

impl Placement {
    pub fn new(topology: &DataCenterTopology) -> Self {
        Placement {
            machine_of: BTreeMap::new(),
            occupied: vec![0; topology.machines.len()],
            slots: topology.machines.iter().map(|m| m.vm_slots).collect(),
        }
    }

    pub fn place(&mut self, instance: InstanceId, machine: MachineId) -> Result<(), TopologyError> {
        if self.machine_of.contains_key(&instance) {
            return Err(TopologyError::AlreadyPlaced(instance));
        }
        let used = self
            .occupied
            .get_mut(machine.0)
            .ok_or_else(|| TopologyError::Unknown(format!("machine {machine}")))?;
        if *used >= self.slots[machine.0] {
            return Err(TopologyError::SlotsFull(machine));
        }
        *used += 1;
        self.machine_of.insert(instance, machine);
        Ok(())
    }

    pub fn remove(&mut self, instance: InstanceId) -> Option<MachineId> {
        let m = self.machine_of.remove(&instance)?;
        self.occupied[m.0] -= 1;
        Some(m)
    }

    pub fn machine(&self, instance: InstanceId) -> Option<MachineId> {
        self.machine_of.get(&instance).copied()
    }

    pub fn rack(&self, topology: &DataCenterTopology, instance: InstanceId) -> Option<RackId> {
        self.machine(instance).map(|m| topology.rack_of(m))
    }

    pub fn occupied(&self, machine: MachineId) -> u32 {
        self.occupied[machine.0]
    }

    pub fn free_slots(&self, machine: MachineId) -> u32 {
        self.slots[machine.0] - self.occupied[machine.0]
    }

    /// First machine in the rack with a free slot.
    pub fn free_machine_in_rack(&self, topology: &DataCenterTopology, rack: RackId) -> Option<MachineId> {
        topology.racks[rack.0].machines.iter().copied().find(|&m| self.free_slots(m) > 0)
    }

    pub fn has_free_slot(&self) -> bool {
        self.occupied.iter().zip(&self.slots).any(|(o, s)| o < s)
    }

    pub fn instances(&self) -> impl Iterator<Item = (InstanceId, MachineId)> + '_ {
        self.machine_of.iter().map(|(i, m)| (*i, *m))
    }

    pub fn len(&self) -> usize {
        self.machine_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.machine_of.is_empty()
    }
}
