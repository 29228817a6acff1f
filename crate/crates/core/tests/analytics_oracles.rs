use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use meshmon::agent::{run_path_trace, run_throughput_test, Endpoint, TestKind, TestSpec};
use meshmon::analytics::{
    check_path_mtu, detect_loss_anomaly, detect_route_changes, detect_throughput_degradation,
    distinct_paths, loss_baseline, Thresholds,
};
use meshmon::measurement::LatencySample;
use meshmon::netsim::{LinkSpec, Topology};
use meshmon::stats::{mad, median, BaselineStats};
use meshmon::{HostId, NodeId, Severity};

fn n(s: &str) -> NodeId {
    NodeId::new(s)
}

/// Diamond A-{B,D}-C, all links bidirectional, route A->C via B.
fn diamond(bw_bc: f64, mtu_bc: u32) -> Topology {
    let mut links = Vec::new();
    for (f, t, bw, mtu) in [
        ("A", "B", 1000.0, 9000),
        ("B", "C", bw_bc, mtu_bc),
        ("A", "D", 1000.0, 9000),
        ("D", "C", 1000.0, 9000),
    ] {
        for (x, y) in [(f, t), (t, f)] {
            links.push(LinkSpec {
                from: n(x),
                to: n(y),
                base_latency_ms: 2.0,
                jitter_max_ms: 0.5,
                loss_prob: 0.0,
                bandwidth_mbps: bw,
                mtu,
            });
        }
    }
    Topology::new(
        [n("A"), n("B"), n("C"), n("D")],
        links,
        [vec![n("A"), n("B"), n("C")]],
        17,
    )
    .unwrap()
}

fn sort_median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        (s[k / 2 - 1] + s[k / 2]) / 2.0
    }
}

#[test]
fn median_and_mad_match_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let len = rng.random_range(1..60);
        let v: Vec<f64> = (0..len)
            .map(|_| rng.random_range(0..50) as f64 / 1000.0)
            .collect();
        let m = sort_median(&v);
        let dev: Vec<f64> = v.iter().map(|x| (x - m).abs()).collect();
        assert_eq!(median(&v), Some(m));
        assert_eq!(mad(&v), Some(sort_median(&dev)));
        // The same code path in single precision.
        let v32: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        assert!((median(&v32).unwrap() - m as f32).abs() < 1e-6);
        let b = BaselineStats::from_values(&v);
        assert_eq!(b.is_some(), len >= 5);
    }
}

fn loss(i: u64, f: f64) -> LatencySample {
    let sent = 1000;
    LatencySample {
        src: HostId::new("a"),
        dst: HostId::new("b"),
        start_time: i,
        packets_sent: sent,
        packets_lost: (f * sent as f64).round() as u64,
        delay: None,
    }
}

#[test]
fn statistical_loss_rule_warns_below_absolute() {
    let base: Vec<_> = (0..20).map(|i| loss(i, 0.001)).collect();
    let b = loss_baseline(&base).unwrap();
    // Brute force: median 0.001, MAD 0, so the statistical threshold is 0.001.
    assert_eq!((b.median, b.mad), (0.001, 0.0));
    let t = Thresholds::default();
    let a = detect_loss_anomaly(&loss(20, 0.012), Some(&b), &t, 0).unwrap();
    assert_eq!(a.severity, Severity::Warn);
    assert_eq!(a.evidence("stat_threshold"), Some("0.001"));
    assert_eq!(
        detect_loss_anomaly(&loss(20, 0.05), Some(&b), &t, 0)
            .unwrap()
            .severity,
        Severity::Critical
    );
}

#[test]
fn bandwidth_cut_flagged_on_first_result_after_change() {
    let spec = TestSpec {
        name: "iperf".into(),
        kind: TestKind::Throughput {
            duration_s: 5,
            payload_size: 1500,
        },
        repeat_interval_s: 600,
        version: 1,
    };
    let cut_at = 6_000_000;
    let topo = diamond(100.0, 1500)
        .with_link_bandwidth(&n("B"), &n("C"), 10.0, cut_at)
        .unwrap();
    let (a, c) = (Endpoint::new("a", "A"), Endpoint::new("c", "C"));
    let t = Thresholds::default();
    let mut series = Vec::new();
    let mut first_alert = None;
    for k in 0..15u64 {
        let start = k * 600_000;
        series.push(run_throughput_test(&spec, &a, &c, &topo, start).unwrap());
        if let Ok(Some(_)) = detect_throughput_degradation(&series, &t, start) {
            first_alert.get_or_insert(start);
        }
    }
    assert_eq!(first_alert, Some(cut_at));
}

#[test]
fn route_changes_match_injection_timeline() {
    let (a, c) = (Endpoint::new("a", "A"), Endpoint::new("c", "C"));
    let topo = diamond(1000.0, 9000)
        .with_route_change(vec![n("A"), n("D"), n("C")], 5_000)
        .unwrap()
        .with_route_change(vec![n("A"), n("B"), n("C")], 12_000)
        .unwrap();
    let series: Vec<_> = (0..20)
        .map(|k| run_path_trace(&a, &c, &topo, k * 1000, 8).unwrap())
        .collect();
    let r = detect_route_changes(&series);
    let at: Vec<_> = r.events.iter().map(|e| e.at).collect();
    assert_eq!(at, [5_000, 12_000]);
    assert_eq!(r.incomplete, 0);

    let d = distinct_paths(&series, 0, 20_000);
    assert_eq!(d.len(), 2);
    assert_eq!((d[0].count, d[1].count), (13, 7));
    assert_eq!(d[1].signature.hop_list(), "D,C");
}

#[test]
fn mtu_violation_agrees_with_min_link_mtu() {
    let topo = diamond(1000.0, 1500);
    let (a, c) = (Endpoint::new("a", "A"), Endpoint::new("c", "C"));
    let pm = run_path_trace(&a, &c, &topo, 0, 8).unwrap();
    let min = topo.resolve_path(&n("A"), &n("C"), 0).unwrap().min_mtu();
    assert_eq!(pm.path_mtu, Some(min));
    let alert = check_path_mtu(&pm, 9000, 0).unwrap();
    assert_eq!(alert.evidence("path_mtu"), Some("1500"));
    assert_eq!(alert.evidence("expected"), Some("9000"));
    assert!(check_path_mtu(&pm, 1500, 0).is_none());
}
