//! Emulated forwarding plane: per-machine virtual switches, tag allocation per
//! instance path, proactive tag rules inside subchains, reactive exact-match
//! rules at subchain heads, smooth weighted round-robin admission and
//! hop-by-hop tracing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::chain::{ChainId, SubchainId};
use crate::flowdist::WeightedPath;
use crate::topology::{InstanceId, MachineId, Placement};

pub const TAG_SPACE: u8 = 64;
pub const EXACT_PRIORITY: u16 = 200;
pub const TAG_PRIORITY: u16 = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForwardingError {
    #[error("tenant {0} has used all {TAG_SPACE} tags")]
    TagSpaceExhausted(String),
    #[error("instance {0} is not placed")]
    MissingPlacement(InstanceId),
    #[error("no instance path available for subchain {0}")]
    NoPath(SubchainId),
    #[error("unknown {0}")]
    Unknown(String),
    #[error("forwarding hole at {switch} for packet from {from} ({detail})")]
    Hole { switch: String, from: InstanceId, detail: String },
    #[error("path is already tagged")]
    AlreadyTagged,
    #[error("weights must sum to 1 (got {0})")]
    BadWeights(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag(pub u8);

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagAllocator {
    pub tenant: String,
    next: u8,
}

impl TagAllocator {
    pub fn new(tenant: impl Into<String>) -> Self {
        TagAllocator { tenant: tenant.into(), next: 0 }
    }

    pub fn allocated(&self) -> usize {
        self.next as usize
    }

    /// Two fresh tags (forward, reverse). Tags are never handed out twice.
    pub fn allocate_pair(&mut self) -> Result<(Tag, Tag), ForwardingError> {
        if self.next as usize + 2 > TAG_SPACE as usize {
            return Err(ForwardingError::TagSpaceExhausted(self.tenant.clone()));
        }
        let t = (Tag(self.next), Tag(self.next + 1));
        self.next += 2;
        Ok(t)
    }
}

/// 5-tuple surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowKey {
    pub src: u32,
    pub dst: u32,
    pub sport: u16,
    pub dport: u16,
    pub proto: u8,
}

impl FlowKey {
    pub fn for_flow(n: u64) -> Self {
        FlowKey {
            src: 0x0a00_0000 | (n as u32 & 0x00ff_ffff),
            dst: 0xc0a8_0001,
            sport: 1024 + (n % 60000) as u16,
            dport: 80,
            proto: 6,
        }
    }

    pub fn reversed(self) -> Self {
        FlowKey { src: self.dst, dst: self.src, sport: self.dport, dport: self.sport, proto: self.proto }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{}.{}.{}:{}>{}.{}.{}.{}:{}/{}",
            self.src >> 24,
            (self.src >> 16) & 0xff,
            (self.src >> 8) & 0xff,
            self.src & 0xff,
            self.sport,
            self.dst >> 24,
            (self.dst >> 16) & 0xff,
            (self.dst >> 8) & 0xff,
            self.dst & 0xff,
            self.dport,
            self.proto
        )
    }
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic header rewrite performed by an M/CT instance.
pub fn mangle(instance: InstanceId, key: FlowKey, salt: u32) -> FlowKey {
    let bytes = instance
        .0
        .to_le_bytes()
        .into_iter()
        .chain(key.src.to_le_bytes())
        .chain(key.dst.to_le_bytes())
        .chain(key.sport.to_le_bytes())
        .chain(key.dport.to_le_bytes())
        .chain([key.proto])
        .chain(salt.to_le_bytes());
    let h = fnv1a(bytes);
    FlowKey { src: 0x6400_0000 | (h as u32 & 0x00ff_ffff), sport: 1024 + ((h >> 32) % 60000) as u16, ..key }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Port {
    Local(InstanceId),
    Tunnel { switch: MachineId, port: InstanceId },
}

impl Port {
    pub fn instance(self) -> InstanceId {
        match self {
            Port::Local(i) | Port::Tunnel { port: i, .. } => i,
        }
    }
}

impl fmt::Display for Port {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Port::Local(i) => write!(f, "local:{i}"),
            Port::Tunnel { switch, port } => write!(f, "tunnel:vs{}/{port}", switch.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Match {
    Exact { key: FlowKey, in_port: Port },
    Tag { tag: Tag, in_port: Port },
}

impl fmt::Display for Match {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Match::Exact { key, in_port } => write!(f, "exact={key} in={in_port}"),
            Match::Tag { tag, in_port } => write!(f, "tag={tag} in={in_port}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    SetTag(Tag),
    Output(Port),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::SetTag(t) => write!(f, "set_tag:{t}"),
            Action::Output(p) => write!(f, "output:{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowRule {
    pub switch: MachineId,
    pub priority: u16,
    pub matcher: Match,
    pub actions: Vec<Action>,
}

impl fmt::Display for FlowRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let actions: Vec<String> = self.actions.iter().map(|a| a.to_string()).collect();
        write!(f, "vs{}, {}, {}, {}", self.switch.0, self.priority, self.matcher, actions.join(";"))
    }
}

/// Rules of every virtual switch, keyed by (switch, match).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuleTable {
    rules: BTreeMap<(MachineId, Match), FlowRule>,
}

impl RuleTable {
    fn insert(&mut self, rule: FlowRule) {
        self.rules.insert((rule.switch, rule.matcher), rule);
    }

    fn remove(&mut self, switch: MachineId, m: &Match) -> Option<FlowRule> {
        self.rules.remove(&(switch, *m))
    }

    /// Highest-priority rule matching a packet that entered `switch` on `in_port`.
    pub fn lookup(&self, switch: MachineId, in_port: Port, key: FlowKey, tag: Option<Tag>) -> Option<&FlowRule> {
        let exact = self.rules.get(&(switch, Match::Exact { key, in_port }));
        let tagged = tag.and_then(|tag| self.rules.get(&(switch, Match::Tag { tag, in_port })));
        match (exact, tagged) {
            (Some(a), Some(b)) => Some(if a.priority >= b.priority { a } else { b }),
            (a, b) => a.or(b),
        }
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn exact_count(&self) -> usize {
        self.rules.keys().filter(|(_, m)| matches!(m, Match::Exact { .. })).count()
    }

    pub fn tag_count(&self) -> usize {
        self.rules.keys().filter(|(_, m)| matches!(m, Match::Tag { .. })).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FlowRule> {
        self.rules.values()
    }

    /// One line per rule, sorted lexicographically.
    pub fn dump(&self) -> String {
        let mut lines: Vec<String> = self.rules.values().map(|r| r.to_string()).collect();
        lines.sort();
        let mut out = lines.join("\n");
        if !out.is_empty() {
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PathId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct InstancePath {
    pub id: PathId,
    pub subchain: SubchainId,
    pub instances: Vec<InstanceId>,
    pub forward_tag: Tag,
    pub reverse_tag: Tag,
    pub weight: f64,
    /// False once any instance on the path is withdrawn from service.
    pub active: bool,
}

impl InstancePath {
    pub fn head(&self) -> InstanceId {
        self.instances[0]
    }

    pub fn tail(&self) -> InstanceId {
        *self.instances.last().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceKind {
    Endpoint,
    Plain,
    Mangling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowState {
    Active,
    /// Pinned to a path that no longer admits new flows.
    Draining,
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowId(pub u64);

impl fmt::Display for FlowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "flow{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub id: FlowId,
    pub chain: ChainId,
    pub key: FlowKey,
    /// One pinned path per subchain, in chain order.
    pub paths: Vec<PathId>,
    /// Header seen inside each subchain.
    pub subchain_keys: Vec<FlowKey>,
    pub rate: f64,
    pub state: FlowState,
}

/// Integerize weights with the smallest denominator that represents them.
pub fn integerize_weights(weights: &[f64]) -> Vec<u64> {
    for d in 1..=1000u64 {
        let df = d as f64;
        if weights.iter().all(|w| (w * df - (w * df).round()).abs() <= 1e-6 * df) {
            return weights.iter().map(|w| (w * df).round().max(0.0) as u64).collect();
        }
    }
    weights.iter().map(|w| (w * 1000.0).round().max(0.0) as u64).collect()
}

/// Smooth weighted round-robin over a fixed candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothWrr {
    weights: Vec<i64>,
    current: Vec<i64>,
}

impl SmoothWrr {
    pub fn new(weights: &[u64]) -> Self {
        let mut w: Vec<i64> = weights.iter().map(|&w| w as i64).collect();
        if w.iter().all(|&x| x == 0) {
            w.iter_mut().for_each(|x| *x = 1);
        }
        SmoothWrr { current: vec![0; w.len()], weights: w }
    }

    pub fn pick(&mut self) -> usize {
        let total: i64 = self.weights.iter().sum();
        let mut best = 0;
        for k in 0..self.weights.len() {
            self.current[k] += self.weights[k];
            if self.current[k] > self.current[best] {
                best = k;
            }
        }
        self.current[best] -= total;
        best
    }
}

#[derive(Debug, Clone)]
struct SubchainState {
    elements: Vec<String>,
    /// Instances per element position.
    instances: Vec<Vec<InstanceId>>,
    paths: Vec<PathId>,
}

#[derive(Debug, Clone)]
struct Wrr {
    candidates: Vec<PathId>,
    state: SmoothWrr,
}

/// The forwarding controller for one tenant.
#[derive(Debug, Clone)]
pub struct ForwardingController {
    pub tags: TagAllocator,
    rules: RuleTable,
    paths: Vec<InstancePath>,
    path_rules: BTreeMap<PathId, Vec<(MachineId, Match)>>,
    subchains: BTreeMap<SubchainId, SubchainState>,
    chains: BTreeMap<ChainId, Vec<SubchainId>>,
    location: BTreeMap<InstanceId, MachineId>,
    kind: BTreeMap<InstanceId, InstanceKind>,
    /// Per M/CT instance: original key → mangled key, and back.
    nat_out: BTreeMap<InstanceId, BTreeMap<FlowKey, FlowKey>>,
    nat_in: BTreeMap<InstanceId, BTreeMap<FlowKey, FlowKey>>,
    withdrawn: BTreeSet<InstanceId>,
    flows: BTreeMap<FlowId, Flow>,
    /// Flows pinned to each path that have not finished.
    path_flows: BTreeMap<PathId, usize>,
    wrr: BTreeMap<(SubchainId, Option<InstanceId>), Wrr>,
    next_flow: u64,
}

/// Description of a chain handed to the controller.
#[derive(Debug, Clone)]
pub struct ChainLayout {
    pub id: ChainId,
    /// Subchains in order; each lists element names including head and tail.
    pub subchains: Vec<Vec<String>>,
}

impl ForwardingController {
    pub fn new(tenant: impl Into<String>) -> Self {
        ForwardingController {
            tags: TagAllocator::new(tenant),
            rules: RuleTable::default(),
            paths: Vec::new(),
            path_rules: BTreeMap::new(),
            subchains: BTreeMap::new(),
            chains: BTreeMap::new(),
            location: BTreeMap::new(),
            kind: BTreeMap::new(),
            nat_out: BTreeMap::new(),
            nat_in: BTreeMap::new(),
            withdrawn: BTreeSet::new(),
            flows: BTreeMap::new(),
            path_flows: BTreeMap::new(),
            wrr: BTreeMap::new(),
            next_flow: 0,
        }
    }

    pub fn rules(&self) -> &RuleTable {
        &self.rules
    }

    pub fn paths(&self) -> &[InstancePath] {
        &self.paths
    }

    pub fn path(&self, id: PathId) -> &InstancePath {
        &self.paths[id.0]
    }

    pub fn flows(&self) -> impl Iterator<Item = &Flow> {
        self.flows.values()
    }

    pub fn flow(&self, id: FlowId) -> Option<&Flow> {
        self.flows.get(&id)
    }

    pub fn subchain_ids(&self, chain: &ChainId) -> &[SubchainId] {
        self.chains.get(chain).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn subchain_paths(&self, sc: &SubchainId) -> Vec<&InstancePath> {
        self.subchains.get(sc).map(|s| s.paths.iter().map(|p| &self.paths[p.0]).collect()).unwrap_or_default()
    }

    pub fn active_flow_count(&self) -> usize {
        self.flows.values().filter(|f| f.state != FlowState::Finished).count()
    }

    pub fn flows_through(&self, instance: InstanceId) -> usize {
        self.path_flows
            .iter()
            .filter(|(p, n)| **n > 0 && self.paths[p.0].instances.contains(&instance))
            .map(|(_, n)| *n)
            .sum()
    }

    /// Mark an instance's kind; endpoints terminate traces, mangling instances rewrite headers.
    pub fn set_kind(&mut self, instance: InstanceId, kind: InstanceKind) {
        self.kind.insert(instance, kind);
    }

    fn locate(&mut self, placement: &Placement, i: InstanceId) -> Result<MachineId, ForwardingError> {
        let m = placement.machine(i).ok_or(ForwardingError::MissingPlacement(i))?;
        self.location.insert(i, m);
        Ok(m)
    }

    fn port_to(&self, from: InstanceId, to: InstanceId) -> Port {
        let (a, b) = (self.location[&from], self.location[&to]);
        if a == b {
            Port::Local(to)
        } else {
            Port::Tunnel { switch: b, port: to }
        }
    }

    /// Register a chain with the instances currently serving each element and
    /// install proactive rules for every instance path.
    pub fn register_chain(
        &mut self,
        layout: &ChainLayout,
        instances: &BTreeMap<String, Vec<InstanceId>>,
        placement: &Placement,
    ) -> Result<Vec<PathId>, ForwardingError> {
        let mut created = Vec::new();
        let mut ids = Vec::new();
        for (k, elements) in layout.subchains.iter().enumerate() {
            let id = SubchainId { chain: layout.id.clone(), index: k };
            let mut per_pos = Vec::new();
            for e in elements {
                let is = instances.get(e).cloned().unwrap_or_default();
                for &i in &is {
                    self.locate(placement, i)?;
                    self.kind.entry(i).or_insert(InstanceKind::Plain);
                }
                per_pos.push(is);
            }
            self.subchains.insert(id.clone(), SubchainState { elements: elements.clone(), instances: per_pos.clone(), paths: Vec::new() });
            for combo in cartesian(&per_pos) {
                created.push(self.create_path(&id, combo)?);
            }
            ids.push(id);
        }
        self.chains.insert(layout.id.clone(), ids);
        Ok(created)
    }

    /// Allocate tags for a new path and install its proactive rules.
    fn create_path(&mut self, sc: &SubchainId, instances: Vec<InstanceId>) -> Result<PathId, ForwardingError> {
        let (forward_tag, reverse_tag) = self.tags.allocate_pair()?;
        let id = PathId(self.paths.len());
        // A path through a withdrawn instance waits for its restore to get rules.
        let active = instances.iter().all(|i| !self.withdrawn.contains(i));
        let path = InstancePath { id, subchain: sc.clone(), instances, forward_tag, reverse_tag, weight: 0.0, active };
        if active {
            let rules = self.proactive_rules(&path);
            let mut owned = Vec::with_capacity(rules.len());
            for r in rules {
                owned.push((r.switch, r.matcher));
                self.rules.insert(r);
            }
            self.path_rules.insert(id, owned);
        }
        self.subchains.get_mut(sc).expect("subchain registered").paths.push(id);
        self.paths.push(path);
        self.invalidate_wrr(sc);
        Ok(id)
    }

    /// Tag rules for every hop after the first, in both directions. The first
    /// hop of each direction is covered by the reactive rule that sets the tag.
    pub fn proactive_rules(&self, path: &InstancePath) -> Vec<FlowRule> {
        let p = &path.instances;
        let n = p.len();
        let mut out = Vec::new();
        for h in 1..n.saturating_sub(1) {
            out.push(FlowRule {
                switch: self.location[&p[h]],
                priority: TAG_PRIORITY,
                matcher: Match::Tag { tag: path.forward_tag, in_port: Port::Local(p[h]) },
                actions: vec![Action::Output(self.port_to(p[h], p[h + 1]))],
            });
        }
        for h in (1..n.saturating_sub(1)).rev() {
            out.push(FlowRule {
                switch: self.location[&p[h]],
                priority: TAG_PRIORITY,
                matcher: Match::Tag { tag: path.reverse_tag, in_port: Port::Local(p[h]) },
                actions: vec![Action::Output(self.port_to(p[h], p[h - 1]))],
            });
        }
        out
    }

    /// A new instance of `element` came up: add paths through it to every
    /// subchain containing the element. Existing paths and rules are untouched.
    pub fn extend_paths_on_provisioning(
        &mut self,
        element: &str,
        instance: InstanceId,
        kind: InstanceKind,
        placement: &Placement,
    ) -> Result<Vec<PathId>, ForwardingError> {
        self.locate(placement, instance)?;
        self.kind.insert(instance, kind);
        let mut created = Vec::new();
        let ids: Vec<SubchainId> = self.subchains.keys().cloned().collect();
        for sc in ids {
            let st = &self.subchains[&sc];
            let positions: Vec<usize> = st.elements.iter().enumerate().filter(|(_, e)| *e == element).map(|(k, _)| k).collect();
            if positions.is_empty() {
                continue;
            }
            let mut per_pos = st.instances.clone();
            for &k in &positions {
                if !per_pos[k].contains(&instance) {
                    per_pos[k].push(instance);
                }
            }
            let before: BTreeSet<Vec<InstanceId>> = cartesian(&st.instances).into_iter().collect();
            self.subchains.get_mut(&sc).unwrap().instances = per_pos.clone();
            for combo in cartesian(&per_pos) {
                if !before.contains(&combo) {
                    created.push(self.create_path(&sc, combo)?);
                }
            }
        }
        Ok(created)
    }

    /// Stop admitting new flows through `instance`. Its paths stay installed
    /// until their flows finish.
    pub fn withdraw_instance(&mut self, instance: InstanceId) {
        self.withdrawn.insert(instance);
        let affected: Vec<PathId> =
            self.paths.iter().filter(|p| p.active && p.instances.contains(&instance)).map(|p| p.id).collect();
        for id in &affected {
            self.paths[id.0].active = false;
            self.paths[id.0].weight = 0.0;
        }
        for f in self.flows.values_mut() {
            if f.state == FlowState::Active && f.paths.iter().any(|p| affected.contains(p)) {
                f.state = FlowState::Draining;
            }
        }
        let scs: BTreeSet<SubchainId> = affected.iter().map(|p| self.paths[p.0].subchain.clone()).collect();
        for sc in scs {
            self.invalidate_wrr(&sc);
        }
        self.collect_garbage();
    }

    /// Put a withdrawn instance back into service (probation rollback).
    pub fn restore_instance(&mut self, instance: InstanceId) {
        if !self.withdrawn.remove(&instance) {
            return;
        }
        let mut scs = BTreeSet::new();
        let revive: Vec<PathId> = self
            .paths
            .iter()
            .filter(|p| !p.active && p.instances.contains(&instance))
            .filter(|p| p.instances.iter().all(|i| !self.withdrawn.contains(i)))
            .map(|p| p.id)
            .collect();
        for id in revive {
            self.paths[id.0].active = true;
            scs.insert(self.paths[id.0].subchain.clone());
            // Rules collected while withdrawn come back with the path's original tags.
            if !self.path_rules.contains_key(&id) {
                let rules = self.proactive_rules(&self.paths[id.0]);
                let owned = rules.iter().map(|r| (r.switch, r.matcher)).collect();
                for r in rules {
                    self.rules.insert(r);
                }
                self.path_rules.insert(id, owned);
            }
        }
        for f in self.flows.values_mut() {
            if f.state == FlowState::Draining && f.paths.iter().all(|p| self.paths[p.0].active) {
                f.state = FlowState::Active;
            }
        }
        for sc in scs {
            self.invalidate_wrr(&sc);
        }
    }

    /// True when no unfinished flow traverses `instance`.
    pub fn is_drained(&self, instance: InstanceId) -> bool {
        self.flows_through(instance) == 0
    }

    /// Forget a drained instance entirely.
    pub fn remove_instance(&mut self, instance: InstanceId) {
        for st in self.subchains.values_mut() {
            for pos in &mut st.instances {
                pos.retain(|&i| i != instance);
            }
        }
        self.collect_garbage();
    }

    /// Remove rules of inactive paths that carry no flows.
    fn collect_garbage(&mut self) {
        let dead: Vec<PathId> = self
            .paths
            .iter()
            .filter(|p| !p.active && self.path_flows.get(&p.id).copied().unwrap_or(0) == 0)
            .map(|p| p.id)
            .filter(|id| self.path_rules.contains_key(id))
            .collect();
        for id in dead {
            for (sw, m) in self.path_rules.remove(&id).unwrap_or_default() {
                self.rules.remove(sw, &m);
            }
        }
    }

    /// Set admission weights for a subchain. Paths not listed get weight 0.
    pub fn set_weights(&mut self, sc: &SubchainId, weights: &[WeightedPath]) -> Result<(), ForwardingError> {
        let st = self.subchains.get(sc).ok_or_else(|| ForwardingError::Unknown(format!("subchain {sc}")))?;
        let sum: f64 = weights.iter().map(|w| w.weight).sum();
        if !weights.is_empty() && (sum - 1.0).abs() > 1e-6 {
            return Err(ForwardingError::BadWeights(sum));
        }
        let ids = st.paths.clone();
        for id in ids {
            let p = &mut self.paths[id.0];
            p.weight = if p.active {
                weights.iter().find(|w| w.instances == p.instances).map(|w| w.weight).unwrap_or(0.0)
            } else {
                0.0
            };
        }
        self.invalidate_wrr(sc);
        Ok(())
    }

    fn invalidate_wrr(&mut self, sc: &SubchainId) {
        let keys: Vec<_> = self.wrr.keys().filter(|(s, _)| s == sc).cloned().collect();
        for k in keys {
            self.wrr.remove(&k);
        }
    }

    fn pick_path(&mut self, sc: &SubchainId, head: Option<InstanceId>) -> Result<PathId, ForwardingError> {
        let key = (sc.clone(), head);
        if !self.wrr.contains_key(&key) {
            let st = self.subchains.get(sc).ok_or_else(|| ForwardingError::Unknown(format!("subchain {sc}")))?;
            let candidates: Vec<PathId> = st
                .paths
                .iter()
                .copied()
                .filter(|p| self.paths[p.0].active)
                .filter(|p| head.is_none_or(|h| self.paths[p.0].head() == h))
                .collect();
            if candidates.is_empty() {
                return Err(ForwardingError::NoPath(sc.clone()));
            }
            let w: Vec<f64> = candidates.iter().map(|p| self.paths[p.0].weight).collect();
            let state = SmoothWrr::new(&integerize_weights(&w));
            self.wrr.insert(key.clone(), Wrr { candidates, state });
        }
        let wrr = self.wrr.get_mut(&key).unwrap();
        let k = wrr.state.pick();
        Ok(wrr.candidates[k])
    }

    /// Admit a new flow: pick an instance path per subchain, rewrite headers
    /// across M/CT boundaries and install exact-match rules at each subchain
    /// head (forward) and tail (reverse).
    pub fn admit_flow(&mut self, chain: &ChainId, rate: f64) -> Result<FlowId, ForwardingError> {
        let scs = self.chains.get(chain).cloned().ok_or_else(|| ForwardingError::Unknown(format!("chain {chain}")))?;
        let id = FlowId(self.next_flow);
        let key = FlowKey::for_flow(self.next_flow);

        // Choose all paths first so a failure leaves no partial state behind.
        let mut chosen = Vec::with_capacity(scs.len());
        let mut head = None;
        for sc in &scs {
            let p = self.pick_path(sc, head)?;
            head = Some(self.paths[p.0].tail());
            chosen.push(p);
        }
        self.next_flow += 1;

        let mut keys = Vec::with_capacity(scs.len());
        let mut k = key;
        for (n, &p) in chosen.iter().enumerate() {
            if n > 0 {
                let boundary = self.paths[p.0].head();
                k = self.mangle_at(boundary, k);
            }
            keys.push(k);
            self.install_exact(p, k);
            *self.path_flows.entry(p).or_default() += 1;
        }
        self.flows.insert(id, Flow {
            id,
            chain: chain.clone(),
            key,
            paths: chosen,
            subchain_keys: keys,
            rate,
            state: FlowState::Active,
        });
        Ok(id)
    }

    fn mangle_at(&mut self, instance: InstanceId, key: FlowKey) -> FlowKey {
        let out = self.nat_out.entry(instance).or_default();
        if let Some(m) = out.get(&key) {
            return *m;
        }
        let inn = self.nat_in.entry(instance).or_default();
        let mut salt = 0;
        let mangled = loop {
            let m = mangle(instance, key, salt);
            if !inn.contains_key(&m) {
                break m;
            }
            salt += 1;
        };
        inn.insert(mangled, key);
        self.nat_out.get_mut(&instance).unwrap().insert(key, mangled);
        mangled
    }

    fn exact_rules(&self, p: PathId, key: FlowKey) -> [FlowRule; 2] {
        let path = &self.paths[p.0];
        let ins = &path.instances;
        let (h, t) = (path.head(), path.tail());
        let n = ins.len();
        let fwd_next = if n > 1 { ins[1] } else { h };
        let rev_next = if n > 1 { ins[n - 2] } else { t };
        [
            FlowRule {
                switch: self.location[&h],
                priority: EXACT_PRIORITY,
                matcher: Match::Exact { key, in_port: Port::Local(h) },
                actions: vec![Action::SetTag(path.forward_tag), Action::Output(self.port_to(h, fwd_next))],
            },
            FlowRule {
                switch: self.location[&t],
                priority: EXACT_PRIORITY,
                matcher: Match::Exact { key: key.reversed(), in_port: Port::Local(t) },
                actions: vec![Action::SetTag(path.reverse_tag), Action::Output(self.port_to(t, rev_next))],
            },
        ]
    }

    fn install_exact(&mut self, p: PathId, key: FlowKey) {
        for r in self.exact_rules(p, key) {
            self.rules.insert(r);
        }
    }

    /// Tear down a finished flow's exact-match rules.
    pub fn finish_flow(&mut self, id: FlowId) -> Result<(), ForwardingError> {
        let flow = self.flows.get(&id).ok_or_else(|| ForwardingError::Unknown(id.to_string()))?.clone();
        if flow.state == FlowState::Finished {
            return Ok(());
        }
        for (&p, &k) in flow.paths.iter().zip(&flow.subchain_keys) {
            for r in self.exact_rules(p, k) {
                self.rules.remove(r.switch, &r.matcher);
            }
            if let Some(n) = self.path_flows.get_mut(&p) {
                *n -= 1;
                if *n == 0 {
                    self.path_flows.remove(&p);
                }
            }
        }
        for (n, &p) in flow.paths.iter().enumerate().skip(1) {
            let boundary = self.paths[p.0].head();
            let orig = flow.subchain_keys[n - 1];
            if let Some(m) = self.nat_out.get_mut(&boundary).and_then(|t| t.remove(&orig)) {
                self.nat_in.get_mut(&boundary).map(|t| t.remove(&m));
            }
        }
        self.flows.get_mut(&id).unwrap().state = FlowState::Finished;
        self.flows.remove(&id);
        self.collect_garbage();
        Ok(())
    }

    /// Pinned instance sequence of a flow (subchain boundaries deduplicated).
    pub fn pinned_sequence(&self, id: FlowId) -> Option<Vec<InstanceId>> {
        let f = self.flows.get(&id)?;
        let mut seq: Vec<InstanceId> = Vec::new();
        for p in &f.paths {
            let ins = &self.paths[p.0].instances;
            let skip = usize::from(!seq.is_empty());
            seq.extend(&ins[skip..]);
        }
        Some(seq)
    }

    /// Walk the rule tables hop by hop in both directions.
    pub fn trace_flow(&self, id: FlowId) -> Result<(Vec<InstanceId>, Vec<InstanceId>), ForwardingError> {
        let f = self.flows.get(&id).ok_or_else(|| ForwardingError::Unknown(id.to_string()))?;
        let first = self.paths[f.paths[0].0].head();
        let last_path = &self.paths[f.paths.last().unwrap().0];
        let fwd = self.walk(first, f.key, true)?;
        let last_key = *f.subchain_keys.last().unwrap();
        let rev = self.walk(last_path.tail(), last_key.reversed(), false)?;
        Ok((fwd, rev))
    }

    fn walk(&self, start: InstanceId, key: FlowKey, forward: bool) -> Result<Vec<InstanceId>, ForwardingError> {
        let mut seq = vec![start];
        let (mut at, mut key, mut tag) = (start, key, None);
        for _ in 0..256 {
            let sw = *self.location.get(&at).ok_or(ForwardingError::MissingPlacement(at))?;
            let from = at;
            let hole = move |detail: String| ForwardingError::Hole { switch: format!("vs{}", sw.0), from, detail };
            let rule = self
                .rules
                .lookup(sw, Port::Local(at), key, tag)
                .ok_or_else(|| hole(format!("no rule for {key} tag {tag:?}")))?;
            let mut next = None;
            for a in &rule.actions {
                match a {
                    Action::SetTag(t) => tag = Some(*t),
                    Action::Output(p) => next = Some(p.instance()),
                }
            }
            let next = next.ok_or_else(|| hole("rule without output".into()))?;
            seq.push(next);
            at = next;
            match self.kind.get(&at).copied().unwrap_or(InstanceKind::Plain) {
                InstanceKind::Endpoint => return Ok(seq),
                InstanceKind::Plain => {}
                InstanceKind::Mangling => {
                    key = if forward {
                        *self.nat_out.get(&at).and_then(|t| t.get(&key)).ok_or_else(|| hole("no NAT state".into()))?
                    } else {
                        let orig = self
                            .nat_in
                            .get(&at)
                            .and_then(|t| t.get(&key.reversed()))
                            .ok_or_else(|| hole("no NAT state".into()))?;
                        orig.reversed()
                    };
                    tag = None;
                }
            }
        }
        Err(ForwardingError::Hole { switch: "-".into(), from: at, detail: "forwarding loop".into() })
    }

    /// Fault injection for audit tests: re-point a flow's first pinned path.
    pub fn corrupt_pin(&mut self, id: FlowId, path: PathId) {
        if let Some(f) = self.flows.get_mut(&id) {
            f.paths[0] = path;
        }
    }

    /// Fault injection: replace the forward exact rule of a flow's first subchain
    /// so its packets follow another path's tag.
    pub fn corrupt_rule(&mut self, id: FlowId, path: PathId) {
        let Some(f) = self.flows.get(&id) else { return };
        let (p0, k0) = (f.paths[0], f.subchain_keys[0]);
        let [fwd, _] = self.exact_rules(p0, k0);
        let [alt, _] = self.exact_rules(path, k0);
        if fwd.switch == alt.switch {
            self.rules.insert(alt);
        }
    }
}

fn cartesian(per_pos: &[Vec<InstanceId>]) -> Vec<Vec<InstanceId>> {
    let mut out: Vec<Vec<InstanceId>> = vec![Vec::new()];
    for pos in per_pos {
        let mut next = Vec::with_capacity(out.len() * pos.len());
        for prefix in &out {
            for &i in pos {
                let mut p = prefix.clone();
                p.push(i);
                next.push(p);
            }
        }
        out = next;
    }
    out
}
