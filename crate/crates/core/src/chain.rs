//! Chain compilation: logical graph construction, the clone transformation for
//! mangling / connection-terminating (M/CT) middleboxes, and subchain splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("chain set contains a cycle through {0}")]
    Cycle(String),
    #[error("chain {chain} references undeclared middlebox {mbox}")]
    UnknownMBox { chain: String, mbox: String },
    #[error("chain {chain} repeats element {element}")]
    RepeatedElement { chain: String, element: String },
    #[error("invalid middlebox {name}: {reason}")]
    InvalidMBox { name: String, reason: String },
    #[error("name {0} is used both as an endpoint and a middlebox")]
    NameClash(String),
    #[error("duplicate chain id {0}")]
    DuplicateChain(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MBoxSpec {
    pub name: String,
    #[serde(default)]
    pub is_mangling: bool,
    #[serde(default = "unit_gain")]
    pub gain_factor_default: f64,
    pub capacity: f64,
}

fn unit_gain() -> f64 {
    1.0
}

impl MBoxSpec {
    pub fn new(name: impl Into<String>, capacity: f64) -> Self {
        MBoxSpec { name: name.into(), is_mangling: false, gain_factor_default: 1.0, capacity }
    }

    pub fn mangling(mut self) -> Self {
        self.is_mangling = true;
        self
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain_factor_default = gain;
        self
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        let bad = |reason: &str| ChainError::InvalidMBox { name: self.name.clone(), reason: reason.into() };
        if !(self.capacity > 0.0) {
            return Err(bad("capacity must be positive"));
        }
        if !(self.gain_factor_default > 0.0 && self.gain_factor_default.is_finite()) {
            return Err(bad("gain must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChainId(pub String);

impl fmt::Display for ChainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ChainId {
    fn from(s: &str) -> Self {
        ChainId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicalChain {
    pub id: ChainId,
    pub source: String,
    pub elements: Vec<String>,
    pub sink: String,
    #[serde(default)]
    pub traffic_class: String,
}

impl LogicalChain {
    pub fn new(id: &str, source: &str, elements: &[&str], sink: &str) -> Self {
        LogicalChain {
            id: ChainId(id.to_string()),
            source: source.to_string(),
            elements: elements.iter().map(|s| s.to_string()).collect(),
            sink: sink.to_string(),
            traffic_class: String::new(),
        }
    }

    /// Source, middleboxes, sink.
    pub fn vertices(&self) -> Vec<&str> {
        std::iter::once(self.source.as_str())
            .chain(self.elements.iter().map(String::as_str))
            .chain(std::iter::once(self.sink.as_str()))
            .collect()
    }
}

pub fn validate_chains(chains: &[LogicalChain], mboxes: &BTreeMap<String, MBoxSpec>) -> Result<(), ChainError> {
    let mut ids = BTreeSet::new();
    for c in chains {
        if !ids.insert(&c.id) {
            return Err(ChainError::DuplicateChain(c.id.0.clone()));
        }
        let mut seen = BTreeSet::new();
        for e in &c.elements {
            if !mboxes.contains_key(e) {
                return Err(ChainError::UnknownMBox { chain: c.id.0.clone(), mbox: e.clone() });
            }
            if !seen.insert(e) {
                return Err(ChainError::RepeatedElement { chain: c.id.0.clone(), element: e.clone() });
            }
        }
        for ep in [&c.source, &c.sink] {
            if mboxes.contains_key(ep) {
                return Err(ChainError::NameClash(ep.clone()));
            }
        }
    }
    for m in mboxes.values() {
        m.validate()?;
    }
    Ok(())
}

/// G = (V, E): middleboxes and endpoints, with an edge for every consecutive pair
/// in some chain.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogicalGraph {
    pub vertices: BTreeSet<String>,
    pub edges: BTreeMap<(String, String), BTreeSet<ChainId>>,
}

impl LogicalGraph {
    pub fn successors(&self, v: &str) -> Vec<&str> {
        self.edges
            .range((v.to_string(), String::new())..)
            .take_while(|((a, _), _)| a == v)
            .map(|((_, b), _)| b.as_str())
            .collect()
    }

    pub fn out_degree(&self, v: &str) -> usize {
        self.successors(v).len()
    }

    /// Kahn's algorithm; ready vertices are taken in name order.
    pub fn topological_order(&self) -> Result<Vec<String>, ChainError> {
        let mut indeg: BTreeMap<&str, usize> = self.vertices.iter().map(|v| (v.as_str(), 0)).collect();
        for (_, b) in self.edges.keys() {
            *indeg.get_mut(b.as_str()).expect("edge endpoints are vertices") += 1;
        }
        let mut ready: BTreeSet<&str> = indeg.iter().filter(|(_, d)| **d == 0).map(|(v, _)| *v).collect();
        let mut order = Vec::with_capacity(self.vertices.len());
        while let Some(v) = ready.pop_first() {
            order.push(v.to_string());
            for s in self.successors(v) {
                let d = indeg.get_mut(s).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() != self.vertices.len() {
            let stuck = indeg.iter().find(|(_, d)| **d > 0).map(|(v, _)| v.to_string()).unwrap_or_default();
            return Err(ChainError::Cycle(stuck));
        }
        Ok(order)
    }

    /// Every path from `v` (exclusive) to a vertex without successors.
    pub fn downstream_paths(&self, v: &str) -> Vec<Vec<String>> {
        fn walk(g: &LogicalGraph, v: &str, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
            let succ = g.successors(v);
            if succ.is_empty() {
                out.push(prefix.clone());
                return;
            }
            for s in succ {
                prefix.push(s.to_string());
                walk(g, s, prefix, out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        if self.successors(v).is_empty() {
            return out;
        }
        walk(self, v, &mut Vec::new(), &mut out);
        out
    }
}

pub fn build_logical_graph(chains: &[LogicalChain]) -> Result<LogicalGraph, ChainError> {
    let mut g = LogicalGraph::default();
    for c in chains {
        let vs = c.vertices();
        for v in &vs {
            g.vertices.insert(v.to_string());
        }
        for w in vs.windows(2) {
            g.edges.entry((w[0].to_string(), w[1].to_string())).or_default().insert(c.id.clone());
        }
    }
    g.topological_order()?;
    Ok(g)
}

/// One clone of an M/CT middlebox and the downstream path it serves.
#[derive(Debug, Clone, PartialEq)]
pub struct CloneInfo {
    pub name: String,
    pub downstream: Vec<String>,
    pub chains: Vec<ChainId>,
}

/// The transformed chain set C′ and how it was derived.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformation {
    pub chains: Vec<LogicalChain>,
    /// Middlebox specs for every name appearing in `chains` (clones included).
    pub mboxes: BTreeMap<String, MBoxSpec>,
    /// Per original M/CT middlebox, its clones in creation order.
    pub clones: BTreeMap<String, Vec<CloneInfo>>,
    /// Clone name → original name (identity for untouched middleboxes).
    pub origin: BTreeMap<String, String>,
}

impl Transformation {
    /// Map clone names back to originals.
    pub fn original_chains(&self) -> Vec<LogicalChain> {
        self.chains
            .iter()
            .map(|c| {
                let mut c = c.clone();
                for e in &mut c.elements {
                    *e = self.origin.get(e).cloned().unwrap_or_else(|| e.clone());
                }
                c
            })
            .collect()
    }
}

/// Replace every M/CT middlebox that has several downstream paths with one
/// clone per path. M/CT vertices are visited in topological order of the
/// original graph and the graph is rebuilt before each visit.
pub fn transform_chains(
    chains: &[LogicalChain],
    mboxes: &BTreeMap<String, MBoxSpec>,
) -> Result<Transformation, ChainError> {
    validate_chains(chains, mboxes)?;
    let order = build_logical_graph(chains)?.topological_order()?;
    let mut current: Vec<LogicalChain> = chains.to_vec();
    let mut specs: BTreeMap<String, MBoxSpec> = BTreeMap::new();
    let mut origin: BTreeMap<String, String> = BTreeMap::new();
    for c in chains {
        for e in &c.elements {
            specs.insert(e.clone(), mboxes[e].clone());
            origin.insert(e.clone(), e.clone());
        }
    }
    let mut clones = BTreeMap::new();

    for m in order {
        let Some(spec) = mboxes.get(&m) else { continue };
        if !spec.is_mangling {
            continue;
        }
        let graph = build_logical_graph(&current)?;
        let paths = graph.downstream_paths(&m);
        if paths.is_empty() {
            continue;
        }

        // Which downstream path each chain through m follows.
        let mut users: Vec<Vec<ChainId>> = vec![Vec::new(); paths.len()];
        let mut first_use: Vec<Option<usize>> = vec![None; paths.len()];
        for (ci, c) in current.iter().enumerate() {
            let Some(pos) = c.elements.iter().position(|e| *e == m) else { continue };
            let mut suffix: Vec<String> = c.elements[pos + 1..].to_vec();
            suffix.push(c.sink.clone());
            let k = paths.iter().position(|p| *p == suffix).expect("chain suffix is a graph path");
            users[k].push(c.id.clone());
            first_use[k].get_or_insert(ci);
        }

        if paths.len() == 1 {
            clones.insert(
                m.clone(),
                vec![CloneInfo { name: m.clone(), downstream: paths[0].clone(), chains: users[0].clone() }],
            );
            continue;
        }

        // Clones are numbered by first use in chain order; unused paths go last.
        let mut idx: Vec<usize> = (0..paths.len()).collect();
        idx.sort_by_key(|&k| (first_use[k].unwrap_or(usize::MAX), k));

        let mut infos = Vec::with_capacity(paths.len());
        let mut rename: BTreeMap<ChainId, String> = BTreeMap::new();
        for (n, &k) in idx.iter().enumerate() {
            let name = format!("{}_{}", m, n + 1);
            for c in &users[k] {
                rename.insert(c.clone(), name.clone());
            }
            let mut clone_spec = spec.clone();
            clone_spec.name = name.clone();
            if !users[k].is_empty() {
                specs.insert(name.clone(), clone_spec);
                origin.insert(name.clone(), m.clone());
            }
            infos.push(CloneInfo { name, downstream: paths[k].clone(), chains: users[k].clone() });
        }
        for c in &mut current {
            if let Some(name) = rename.get(&c.id) {
                for e in &mut c.elements {
                    if *e == m {
                        *e = name.clone();
                    }
                }
            }
        }
        specs.remove(&m);
        origin.remove(&m);
        clones.insert(m.clone(), infos);
    }

    Ok(Transformation { chains: current, mboxes: specs, clones, origin })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubchainId {
    pub chain: ChainId,
    pub index: usize,
}

impl fmt::Display for SubchainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.chain, self.index)
    }
}

/// A chain segment that starts at the client or an M/CT middlebox and ends
/// at the next M/CT middlebox or the server. `elements` includes both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Subchain {
    pub id: SubchainId,
    pub elements: Vec<String>,
    /// Index of `elements[0]` within the chain's vertex list (source = 0).
    pub offset: usize,
}

impl Subchain {
    pub fn head(&self) -> &str {
        &self.elements[0]
    }

    pub fn tail(&self) -> &str {
        self.elements.last().expect("subchain has a head and a tail")
    }
}

/// Split a (transformed) chain at its M/CT middleboxes.
pub fn split_subchains(chain: &LogicalChain, mboxes: &BTreeMap<String, MBoxSpec>) -> Vec<Subchain> {
    let vs = chain.vertices();
    let mut out = Vec::new();
    let mut start = 0;
    for (k, v) in vs.iter().enumerate().skip(1) {
        let boundary = k == vs.len() - 1 || mboxes.get(*v).is_some_and(|s| s.is_mangling);
        if boundary {
            out.push(Subchain {
                id: SubchainId { chain: chain.id.clone(), index: out.len() },
                elements: vs[start..=k].iter().map(|s| s.to_string()).collect(),
                offset: start,
            });
            start = k;
        }
    }
    out
}
