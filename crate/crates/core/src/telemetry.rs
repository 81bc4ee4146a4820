//! Metric datastore fed by the simulator, with sliding-window queries.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::chain::ChainId;
use crate::topology::{InstanceId, LinkId};

pub const DEFAULT_WINDOW_S: f64 = 10.0;
pub const GAIN_MIN: f64 = 1e-3;
pub const GAIN_MAX: f64 = 1e3;
/// Ceiling on synthesized per-packet time, as a multiple of the base time.
pub const PER_PACKET_CLAMP: f64 = 50.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TelemetryError {
    #[error("negative or non-finite value {value} for {subject}/{kind}")]
    BadValue { subject: SubjectId, kind: MetricKind, value: f64 },
    #[error("fraction {value} outside [0, 1] for {subject}/{kind}")]
    BadFraction { subject: SubjectId, kind: MetricKind, value: f64 },
    #[error("timestamp {t} precedes the last sample of {subject}/{kind}")]
    NonMonotone { subject: SubjectId, kind: MetricKind, t: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SubjectId {
    Instance(InstanceId),
    Link(LinkId),
    App(ChainId),
}

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubjectId::Instance(i) => write!(f, "{i}"),
            SubjectId::Link(l) => write!(f, "{l}"),
            SubjectId::App(c) => write!(f, "app:{c}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetricKind {
    PerPacketTimeUs,
    CpuFrac,
    MemFrac,
    LinkMbps,
    LatencyMs,
    BacklogRequests,
    IngressMbps,
    EgressMbps,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::PerPacketTimeUs => "per_packet_time_us",
            MetricKind::CpuFrac => "cpu_frac",
            MetricKind::MemFrac => "mem_frac",
            MetricKind::LinkMbps => "link_mbps",
            MetricKind::LatencyMs => "latency_ms",
            MetricKind::BacklogRequests => "backlog_requests",
            MetricKind::IngressMbps => "ingress_mbps",
            MetricKind::EgressMbps => "egress_mbps",
        }
    }

    fn is_fraction(self) -> bool {
        matches!(self, MetricKind::CpuFrac | MetricKind::MemFrac)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSample {
    pub subject: SubjectId,
    pub kind: MetricKind,
    pub timestamp: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub duration: f64,
    pub aggregation: Aggregation,
}

impl Window {
    pub fn mean(duration: f64) -> Self {
        Window { duration, aggregation: Aggregation::Mean }
    }
}

impl Default for Window {
    fn default() -> Self {
        Window::mean(DEFAULT_WINDOW_S)
    }
}

#[derive(Debug, Clone, Default)]
pub struct MetricStore {
    series: BTreeMap<(SubjectId, MetricKind), Vec<(f64, f64)>>,
}

impl MetricStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, s: MetricSample) -> Result<(), TelemetryError> {
        if !(s.value >= 0.0 && s.value.is_finite()) {
            return Err(TelemetryError::BadValue { subject: s.subject, kind: s.kind, value: s.value });
        }
        if s.kind.is_fraction() && s.value > 1.0 {
            return Err(TelemetryError::BadFraction { subject: s.subject, kind: s.kind, value: s.value });
        }
        let series = self.series.entry((s.subject.clone(), s.kind)).or_default();
        if series.last().is_some_and(|(t, _)| *t > s.timestamp) {
            return Err(TelemetryError::NonMonotone { subject: s.subject, kind: s.kind, t: s.timestamp });
        }
        series.push((s.timestamp, s.value));
        Ok(())
    }

    /// Shorthand for `record` with a fresh sample.
    pub fn put(&mut self, subject: SubjectId, kind: MetricKind, t: f64, value: f64) -> Result<(), TelemetryError> {
        self.record(MetricSample { subject, kind, timestamp: t, value })
    }

    /// Samples with timestamps in `[from, to]`.
    pub fn samples(&self, subject: &SubjectId, kind: MetricKind, from: f64, to: f64) -> &[(f64, f64)] {
        let Some(s) = self.series.get(&(subject.clone(), kind)) else { return &[] };
        let lo = s.partition_point(|(t, _)| *t < from);
        let hi = s.partition_point(|(t, _)| *t <= to);
        &s[lo..hi.max(lo)]
    }

    pub fn first_timestamp(&self, subject: &SubjectId, kind: MetricKind) -> Option<f64> {
        self.series.get(&(subject.clone(), kind)).and_then(|s| s.first()).map(|(t, _)| *t)
    }

    pub fn aggregate_range(
        &self,
        subject: &SubjectId,
        kind: MetricKind,
        from: f64,
        to: f64,
        agg: Aggregation,
    ) -> Option<f64> {
        let s = self.samples(subject, kind, from, to);
        if s.is_empty() {
            return None;
        }
        let vals = s.iter().map(|(_, v)| *v);
        Some(match agg {
            Aggregation::Mean => vals.sum::<f64>() / s.len() as f64,
            Aggregation::Min => vals.fold(f64::INFINITY, f64::min),
            Aggregation::Max => vals.fold(f64::NEG_INFINITY, f64::max),
        })
    }

    /// Aggregate over `[now − duration, now]`; `None` when the window is empty.
    pub fn query(&self, subject: &SubjectId, kind: MetricKind, window: Window, now: f64) -> Option<f64> {
        self.aggregate_range(subject, kind, now - window.duration, now, window.aggregation)
    }

    /// Drop samples older than `t`.
    pub fn prune_before(&mut self, t: f64) {
        for s in self.series.values_mut() {
            let k = s.partition_point(|(ts, _)| *ts < t);
            s.drain(..k);
        }
    }

    pub fn len(&self) -> usize {
        self.series.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `timestamp,subject,kind,value` rows sorted by timestamp.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(f64, String, &str, f64)> = Vec::with_capacity(self.len());
        for ((subj, kind), s) in &self.series {
            let name = subj.to_string();
            for &(t, v) in s {
                rows.push((t, name.clone(), kind.name(), v));
            }
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)).then_with(|| a.2.cmp(b.2)));
        let mut out = String::from("timestamp,subject,kind,value\n");
        for (t, s, k, v) in rows {
            out.push_str(&format!("{t},{s},{k},{v}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainEstimate {
    pub gamma: f64,
    /// Set when egress was zero or the ratio had to be clamped.
    pub degenerate: bool,
}

/// γ at a chain position: mean ingress over mean egress of the position's
/// instances, clamped to [1e-3, 1e3].
pub fn compute_gain_factor(store: &MetricStore, instances: &[InstanceId], window: Window, now: f64) -> Option<GainEstimate> {
    let mut ingress = 0.0;
    let mut egress = 0.0;
    let mut seen = false;
    for &i in instances {
        let subj = SubjectId::Instance(i);
        let a = store.query(&subj, MetricKind::IngressMbps, Window::mean(window.duration), now);
        let b = store.query(&subj, MetricKind::EgressMbps, Window::mean(window.duration), now);
        if let (Some(a), Some(b)) = (a, b) {
            ingress += a;
            egress += b;
            seen = true;
        }
    }
    if !seen {
        return None;
    }
    if egress <= 0.0 {
        return Some(GainEstimate { gamma: GAIN_MAX, degenerate: true });
    }
    let raw = ingress / egress;
    let gamma = raw.clamp(GAIN_MIN, GAIN_MAX);
    Some(GainEstimate { gamma, degenerate: gamma != raw })
}

/// V_c: mean offered rate at the chain source over the window; 0 when idle.
pub fn measure_chain_volume(store: &MetricStore, chain: &ChainId, window: Window, now: f64) -> f64 {
    store
        .query(&SubjectId::App(chain.clone()), MetricKind::IngressMbps, Window::mean(window.duration), now)
        .unwrap_or(0.0)
}

/// Per-packet processing time as a function of utilization.
pub fn per_packet_time(base: f64, utilization: f64) -> f64 {
    (base / (1.0 - utilization).max(1e-3)).min(PER_PACKET_CLAMP * base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn app() -> SubjectId {
        SubjectId::App(ChainId("c".into()))
    }

    #[test]
    fn mean_of_window() {
        let mut s = MetricStore::new();
        for (t, v) in [(1.0, 10.0), (2.0, 20.0), (3.0, 30.0)] {
            s.put(app(), MetricKind::LatencyMs, t, v).unwrap();
        }
        assert_eq!(s.query(&app(), MetricKind::LatencyMs, Window::mean(10.0), 3.0), Some(20.0));
        assert_eq!(s.query(&app(), MetricKind::LatencyMs, Window::mean(1.0), 3.0), Some(25.0));
        assert_eq!(s.query(&app(), MetricKind::BacklogRequests, Window::mean(1.0), 3.0), None);
    }

    #[test]
    fn rejects_bad_samples() {
        let mut s = MetricStore::new();
        let i = SubjectId::Instance(InstanceId(1));
        assert!(s.put(i.clone(), MetricKind::CpuFrac, 0.0, 1.5).is_err());
        assert!(s.put(i.clone(), MetricKind::LinkMbps, 0.0, -1.0).is_err());
        s.put(i.clone(), MetricKind::LinkMbps, 5.0, 1.0).unwrap();
        assert!(s.put(i, MetricKind::LinkMbps, 4.0, 1.0).is_err());
    }

    #[test]
    fn gain_factor_cases() {
        let mut s = MetricStore::new();
        let i = InstanceId(0);
        s.put(SubjectId::Instance(i), MetricKind::IngressMbps, 0.0, 100.0).unwrap();
        s.put(SubjectId::Instance(i), MetricKind::EgressMbps, 0.0, 50.0).unwrap();
        let g = compute_gain_factor(&s, &[i], Window::default(), 0.0).unwrap();
        assert_eq!(g, GainEstimate { gamma: 2.0, degenerate: false });

        let j = InstanceId(1);
        s.put(SubjectId::Instance(j), MetricKind::IngressMbps, 0.0, 100.0).unwrap();
        s.put(SubjectId::Instance(j), MetricKind::EgressMbps, 0.0, 0.0).unwrap();
        let g = compute_gain_factor(&s, &[j], Window::default(), 0.0).unwrap();
        assert_eq!(g, GainEstimate { gamma: 1e3, degenerate: true });
    }

    #[test]
    fn idle_chain_has_zero_volume() {
        let s = MetricStore::new();
        assert_eq!(measure_chain_volume(&s, &ChainId("c".into()), Window::default(), 10.0), 0.0);
    }

    #[test]
    fn per_packet_time_clamps() {
        assert_eq!(per_packet_time(100.0, 0.0), 100.0);
        assert_eq!(per_packet_time(100.0, 0.5), 200.0);
        assert_eq!(per_packet_time(100.0, 1.0), 5000.0);
    }

    #[test]
    fn csv_sorted_by_time() {
        let mut s = MetricStore::new();
        s.put(SubjectId::Link(LinkId(2)), MetricKind::LinkMbps, 2.0, 5.0).unwrap();
        s.put(app(), MetricKind::LatencyMs, 1.0, 3.0).unwrap();
        let csv = s.to_csv();
        assert_eq!(csv, "timestamp,subject,kind,value\n1,app:c,latency_ms,3\n2,l2,link_mbps,5\n");
    }
}
