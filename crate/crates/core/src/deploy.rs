//! A tenant's deployed chains: transformed chain set, subchain plan and the
//! lifecycle of every middlebox and endpoint instance.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::chain::{split_subchains, ChainId, LogicalChain, MBoxSpec, Subchain, Transformation};
use crate::flowdist::{ChainStages, FlowDistribution};
use crate::forwarding::{ChainLayout, InstanceKind};
use crate::topology::InstanceId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointSpec {
    pub name: String,
    /// Per-instance rate limit (Mbps); `None` means unbounded.
    #[serde(default)]
    pub capacity_mbps: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceState {
    /// Launched, not yet carrying traffic.
    Booting,
    Serving,
    /// Withdrawn on probation; may be restored.
    Probation,
    /// Out of service, destroyed once its flows finish.
    Draining,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub element: String,
    pub state: InstanceState,
    pub ready_at: f64,
}

#[derive(Debug, Clone)]
pub struct Deployment {
    pub tenant: String,
    /// Middlebox specs by (possibly cloned) name.
    pub mboxes: BTreeMap<String, MBoxSpec>,
    pub endpoints: BTreeMap<String, EndpointSpec>,
    /// The transformed chain set.
    pub chains: Vec<LogicalChain>,
    pub subchains: BTreeMap<ChainId, Vec<Subchain>>,
    pub records: BTreeMap<InstanceId, InstanceRecord>,
    /// γ per chain stage (endpoints 1).
    pub gains: BTreeMap<ChainId, Vec<f64>>,
    /// Distribution the controller last configured.
    pub distribution: FlowDistribution,
    /// Middleboxes that busy-poll and always report full CPU.
    pub polling: BTreeSet<String>,
    /// Clone name → name the operator wrote.
    pub origin: BTreeMap<String, String>,
}

impl Deployment {
    pub fn new(tenant: impl Into<String>, t: &Transformation, endpoints: BTreeMap<String, EndpointSpec>) -> Self {
        let mut subchains = BTreeMap::new();
        let mut gains = BTreeMap::new();
        for c in &t.chains {
            subchains.insert(c.id.clone(), split_subchains(c, &t.mboxes));
            let mut g = vec![1.0];
            g.extend(c.elements.iter().map(|e| t.mboxes[e].gain_factor_default));
            g.push(1.0);
            gains.insert(c.id.clone(), g);
        }
        Deployment {
            tenant: tenant.into(),
            mboxes: t.mboxes.clone(),
            endpoints,
            chains: t.chains.clone(),
            subchains,
            records: BTreeMap::new(),
            gains,
            distribution: FlowDistribution::default(),
            polling: BTreeSet::new(),
            origin: t.origin.clone(),
        }
    }

    pub fn is_endpoint(&self, element: &str) -> bool {
        !self.mboxes.contains_key(element)
    }

    pub fn kind_of(&self, element: &str) -> InstanceKind {
        match self.mboxes.get(element) {
            None => InstanceKind::Endpoint,
            Some(m) if m.is_mangling => InstanceKind::Mangling,
            Some(_) => InstanceKind::Plain,
        }
    }

    pub fn add_instance(&mut self, i: InstanceId, element: &str, state: InstanceState, ready_at: f64) {
        self.records.insert(i, InstanceRecord { element: element.to_string(), state, ready_at });
    }

    pub fn element_of(&self, i: InstanceId) -> Option<&str> {
        self.records.get(&i).map(|r| r.element.as_str())
    }

    pub fn instances_in(&self, element: &str, states: &[InstanceState]) -> Vec<InstanceId> {
        self.records
            .iter()
            .filter(|(_, r)| r.element == element && states.contains(&r.state))
            .map(|(i, _)| *i)
            .collect()
    }

    pub fn serving(&self, element: &str) -> Vec<InstanceId> {
        self.instances_in(element, &[InstanceState::Serving])
    }

    /// Serving instances grouped by element.
    pub fn serving_map(&self) -> BTreeMap<String, Vec<InstanceId>> {
        let mut m: BTreeMap<String, Vec<InstanceId>> = BTreeMap::new();
        for (i, r) in &self.records {
            if r.state == InstanceState::Serving {
                m.entry(r.element.clone()).or_default().push(*i);
            }
        }
        m
    }

    /// Middlebox instances that occupy a slot and are not on their way out.
    pub fn middlebox_count(&self) -> usize {
        self.records
            .values()
            .filter(|r| !self.is_endpoint(&r.element))
            .filter(|r| matches!(r.state, InstanceState::Booting | InstanceState::Serving | InstanceState::Probation))
            .count()
    }

    /// Alive instance count per middlebox element.
    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut m: BTreeMap<String, usize> = self.mboxes.keys().map(|k| (k.clone(), 0)).collect();
        for r in self.records.values() {
            if matches!(r.state, InstanceState::Booting | InstanceState::Serving | InstanceState::Probation) {
                if let Some(n) = m.get_mut(&r.element) {
                    *n += 1;
                }
            }
        }
        m
    }

    /// Solver view of every chain over serving instances.
    pub fn stages(&self, demand: &BTreeMap<ChainId, f64>) -> Vec<ChainStages> {
        self.stages_with(demand, &BTreeMap::new())
    }

    /// As `stages`, with extra instances appended to their element's position.
    pub fn stages_with(
        &self,
        demand: &BTreeMap<ChainId, f64>,
        extra: &BTreeMap<String, Vec<InstanceId>>,
    ) -> Vec<ChainStages> {
        let serving = self.serving_map();
        self.chains
            .iter()
            .map(|c| {
                let stages = c
                    .vertices()
                    .into_iter()
                    .map(|e| {
                        let mut v = serving.get(e).cloned().unwrap_or_default();
                        if let Some(x) = extra.get(e) {
                            v.extend(x);
                        }
                        v
                    })
                    .collect();
                ChainStages {
                    id: c.id.clone(),
                    stages,
                    gains: self.gains[&c.id].clone(),
                    demand: demand.get(&c.id).copied().unwrap_or(0.0),
                }
            })
            .collect()
    }

    /// Per-instance capacity of serving instances (unbounded endpoints omitted).
    pub fn capacities(&self) -> BTreeMap<InstanceId, f64> {
        self.records
            .iter()
            .filter(|(_, r)| r.state == InstanceState::Serving)
            .filter_map(|(i, r)| self.capacity_of(&r.element).map(|c| (*i, c)))
            .collect()
    }

    pub fn capacity_of(&self, element: &str) -> Option<f64> {
        match self.mboxes.get(element) {
            Some(m) => Some(m.capacity),
            None => self.endpoints.get(element).and_then(|e| e.capacity_mbps),
        }
    }

    /// Elements adjacent to `element` in some chain.
    pub fn neighbors(&self, element: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for c in &self.chains {
            let vs = c.vertices();
            for (k, v) in vs.iter().enumerate() {
                if *v == element {
                    if k > 0 {
                        out.insert(vs[k - 1].to_string());
                    }
                    if k + 1 < vs.len() {
                        out.insert(vs[k + 1].to_string());
                    }
                }
            }
        }
        out
    }

    pub fn layouts(&self) -> Vec<ChainLayout> {
        self.chains
            .iter()
            .map(|c| ChainLayout { id: c.id.clone(), subchains: self.subchains[&c.id].iter().map(|s| s.elements.clone()).collect() })
            .collect()
    }

    /// Position range (first, last) of each subchain within the chain's vertices.
    pub fn subchain_ranges(&self, chain: &ChainId) -> Vec<(usize, usize)> {
        self.subchains[chain].iter().map(|s| (s.offset, s.offset + s.elements.len() - 1)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::transform_chains;

    #[test]
    fn stages_follow_serving_instances() {
        let mboxes: BTreeMap<String, MBoxSpec> =
            [("A".to_string(), MBoxSpec::new("A", 60.0)), ("B".to_string(), MBoxSpec::new("B", 50.0).with_gain(2.0))].into();
        let chains = vec![LogicalChain::new("c", "gen", &["A", "B"], "srv")];
        let t = transform_chains(&chains, &mboxes).unwrap();
        let mut d = Deployment::new("t", &t, BTreeMap::new());
        d.add_instance(InstanceId(0), "gen", InstanceState::Serving, 0.0);
        d.add_instance(InstanceId(1), "A", InstanceState::Serving, 0.0);
        d.add_instance(InstanceId(2), "A", InstanceState::Booting, 5.0);
        d.add_instance(InstanceId(3), "B", InstanceState::Serving, 0.0);
        d.add_instance(InstanceId(4), "srv", InstanceState::Serving, 0.0);
        let demand = [(ChainId("c".into()), 10.0)].into();
        let s = d.stages(&demand);
        assert_eq!(s[0].stages[1], vec![InstanceId(1)]);
        assert_eq!(s[0].gains, vec![1.0, 1.0, 2.0, 1.0]);
        assert_eq!(d.middlebox_count(), 3);
        assert_eq!(d.neighbors("A"), ["B".to_string(), "gen".to_string()].into());
        assert_eq!(d.capacities().len(), 2);
    }
}
