//! Metric store queries and SLO evaluation against direct recomputation.

use chainorch::chain::ChainId;
use chainorch::provisioning::{check_slo, ProvisioningConfig};
use chainorch::telemetry::{
    compute_gain_factor, per_packet_time, Aggregation, MetricKind, MetricStore, SubjectId, Window, GAIN_MAX, GAIN_MIN,
};
use chainorch::topology::InstanceId;
use proptest::prelude::*;

/// Non-decreasing timestamps with values in [0, 100).
fn series() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0u8..4, 0.0..100.0f64), 0..60).prop_map(|steps| {
        let mut t = 0.0;
        steps
            .into_iter()
            .map(|(dt, v)| {
                t += dt as f64 * 0.5;
                (t, v)
            })
            .collect()
    })
}

fn oracle(s: &[(f64, f64)], from: f64, to: f64, agg: Aggregation) -> Option<f64> {
    let v: Vec<f64> = s.iter().filter(|(t, _)| *t >= from && *t <= to).map(|(_, v)| *v).collect();
    if v.is_empty() {
        return None;
    }
    Some(match agg {
        Aggregation::Mean => v.iter().sum::<f64>() / v.len() as f64,
        Aggregation::Min => v.iter().copied().fold(f64::INFINITY, f64::min),
        Aggregation::Max => v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn queries_match_direct_aggregation(s in series(), now in 0.0..40.0f64, d in 0.5..20.0f64) {
        let subj = SubjectId::Instance(InstanceId(3));
        let mut a = MetricStore::new();
        let mut b = MetricStore::new();
        for &(t, v) in &s {
            a.put(subj.clone(), MetricKind::IngressMbps, t, v).unwrap();
            b.put(subj.clone(), MetricKind::IngressMbps, t, v).unwrap();
        }
        for agg in [Aggregation::Mean, Aggregation::Min, Aggregation::Max] {
            let w = Window { duration: d, aggregation: agg };
            let got = a.query(&subj, MetricKind::IngressMbps, w, now);
            // Identical sample sets give identical aggregates, bit for bit.
            prop_assert_eq!(got.map(f64::to_bits), b.query(&subj, MetricKind::IngressMbps, w, now).map(f64::to_bits));
            let want = oracle(&s, now - d, now, agg);
            match (got, want) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0)),
                (None, None) => {}
                _ => prop_assert!(false, "{:?} vs {:?}", got, want),
            }
        }
        // Other kinds and subjects are unaffected.
        prop_assert!(a.query(&subj, MetricKind::EgressMbps, Window::mean(d), now).is_none());
    }

    #[test]
    fn prune_keeps_exactly_recent_samples(s in series(), cut in 0.0..40.0f64) {
        let subj = SubjectId::Instance(InstanceId(0));
        let mut a = MetricStore::new();
        for &(t, v) in &s {
            a.put(subj.clone(), MetricKind::CpuFrac, t, v / 100.0).unwrap();
        }
        a.prune_before(cut);
        prop_assert_eq!(a.len(), s.iter().filter(|(t, _)| *t >= cut).count());
    }

    #[test]
    fn slo_matches_every_sample_rule(
        lat in prop::collection::vec(0.0..90.0f64, 1..40),
        bl in prop::collection::vec(0.0..20.0f64, 1..40),
        now in 0.0..45.0f64,
    ) {
        let cfg = ProvisioningConfig::default();
        let c = ChainId("c".into());
        let subj = SubjectId::App(c.clone());
        let mut st = MetricStore::new();
        let ls: Vec<(f64, f64)> = lat.iter().enumerate().map(|(k, v)| (k as f64, *v)).collect();
        let bs: Vec<(f64, f64)> = bl.iter().enumerate().map(|(k, v)| (k as f64, *v)).collect();
        for &(t, v) in &ls {
            st.put(subj.clone(), MetricKind::LatencyMs, t, v).unwrap();
        }
        for &(t, v) in &bs {
            st.put(subj.clone(), MetricKind::BacklogRequests, t, v).unwrap();
        }
        let from = now - cfg.slo_window_s;
        let covered = from >= 0.0;
        let all = |s: &[(f64, f64)], thr: f64| {
            let w: Vec<f64> = s.iter().filter(|(t, _)| *t >= from && *t <= now).map(|(_, v)| *v).collect();
            !w.is_empty() && w.iter().all(|v| *v > thr)
        };
        let want = covered && (all(&ls, cfg.slo_latency_ms) || all(&bs, cfg.slo_backlog));
        let got = check_slo(&st, &c, &cfg, now);
        prop_assert_eq!(got.covered, covered);
        prop_assert_eq!(got.violated, want);
    }

    #[test]
    fn per_packet_time_is_monotone_and_clamped(base in 0.1..100.0f64, u in 0.0..1.0f64, du in 0.0..1.0f64) {
        let u2 = (u + du).min(1.0);
        let (a, b) = (per_packet_time(base, u), per_packet_time(base, u2));
        prop_assert!(a <= b);
        prop_assert!(a >= base && b <= 50.0 * base);
    }

    #[test]
    fn gain_is_ratio_within_clamp(ins in 0.0..1e4f64, outs in 0.0..1e4f64) {
        let mut st = MetricStore::new();
        let subj = SubjectId::Instance(InstanceId(1));
        for t in 0..=10 {
            st.put(subj.clone(), MetricKind::IngressMbps, t as f64, ins).unwrap();
            st.put(subj.clone(), MetricKind::EgressMbps, t as f64, outs).unwrap();
        }
        let g = compute_gain_factor(&st, &[InstanceId(1)], Window::mean(10.0), 10.0).unwrap();
        prop_assert!((GAIN_MIN..=GAIN_MAX).contains(&g.gamma));
        if outs > 0.0 && !g.degenerate {
            prop_assert!((g.gamma - ins / outs).abs() <= 1e-9 * (ins / outs));
        }
        prop_assert!(compute_gain_factor(&st, &[InstanceId(2)], Window::mean(10.0), 10.0).is_none());
    }
}

#[test]
fn store_rejects_bad_samples() {
    let mut st = MetricStore::new();
    let s = SubjectId::Instance(InstanceId(0));
    st.put(s.clone(), MetricKind::CpuFrac, 5.0, 0.5).unwrap();
    assert!(st.put(s.clone(), MetricKind::CpuFrac, 4.0, 0.5).is_err());
    assert!(st.put(s.clone(), MetricKind::CpuFrac, 6.0, 1.5).is_err());
    assert!(st.put(s.clone(), MetricKind::IngressMbps, 6.0, -1.0).is_err());
    assert!(st.put(s.clone(), MetricKind::IngressMbps, 6.0, f64::NAN).is_err());
    // Equal timestamps are allowed.
    st.put(s, MetricKind::CpuFrac, 5.0, 0.7).unwrap();
}
