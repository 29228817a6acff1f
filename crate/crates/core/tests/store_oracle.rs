use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use meshmon::measurement::{LatencySample, PathMeasurement, ThroughputResult};
use meshmon::store::{LongTermStore, MeasurementStore, QueryFilter, ShortTermStore};
use meshmon::{HostId, Measurement, MeasurementEnvelope, MetricKind};

const HOSTS: [&str; 4] = ["a", "b", "c", "d"];

fn random_envelope(rng: &mut ChaCha8Rng) -> MeasurementEnvelope {
    let src = HostId::new(HOSTS[rng.random_range(0..4)]);
    let dst = HostId::new(HOSTS[rng.random_range(0..4)]);
    let start = rng.random_range(0..500u64) * 10;
    let m: Measurement = match rng.random_range(0..3) {
        0 => LatencySample {
            src: src.clone(),
            dst,
            start_time: start,
            packets_sent: 10,
            packets_lost: 10,
            delay: None,
        }
        .into(),
        1 => ThroughputResult {
            src: src.clone(),
            dst,
            start_time: start,
            achieved_mbps: rng.random_range(1..1000) as f64,
            retransmits: rng.random_range(0..100),
            cwnd_final_bytes: 1500,
        }
        .into(),
        _ => PathMeasurement {
            src: src.clone(),
            dst,
            start_time: start,
            hops: vec![],
            destination_reached: false,
            path_mtu: None,
        }
        .into(),
    };
    MeasurementEnvelope::new(src, start + 5, start + 60, m)
}

fn random_filter(rng: &mut ChaCha8Rng) -> QueryFilter {
    let pick = |rng: &mut ChaCha8Rng| {
        rng.random_bool(0.5)
            .then(|| HostId::new(HOSTS[rng.random_range(0..4)]))
    };
    let a = rng.random_range(0..5200u64);
    let b = rng.random_range(0..5200u64);
    QueryFilter {
        src: pick(rng),
        dst: pick(rng),
        kind: rng
            .random_bool(0.5)
            .then(|| MetricKind::ALL[rng.random_range(0..3)]),
        from: a.min(b),
        to: a.max(b),
    }
}

#[test]
fn query_matches_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = LongTermStore::in_memory();
    let mut all: Vec<MeasurementEnvelope> = Vec::new();
    for _ in 0..3000 {
        let e = random_envelope(&mut rng);
        if !all.iter().any(|x| x.id == e.id) {
            all.push(e.clone());
        }
        store.append(e).unwrap();
    }
    assert_eq!(store.len(), all.len());
    for _ in 0..1000 {
        let f = random_filter(&mut rng);
        let mut expect: Vec<&MeasurementEnvelope> = all.iter().filter(|e| f.matches(e)).collect();
        expect.sort_by_key(|e| (e.start_time(), e.id));
        let got = store.query(&f);
        assert_eq!(got.len(), expect.len(), "{f:?}");
        assert!(got.iter().zip(&expect).all(|(g, e)| **g == **e));
    }
}

#[test]
fn prune_conservation_and_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let store = ShortTermStore::in_memory(1000);
    let (mut accepted, mut pruned) = (0usize, 0usize);
    for now in (0..5000).step_by(250) {
        for _ in 0..50 {
            if store.append(random_envelope(&mut rng)).unwrap()
                == meshmon::store::AppendOutcome::Accepted
            {
                accepted += 1;
            }
        }
        pruned += store.prune(now).unwrap();
        assert_eq!(accepted - pruned, store.len());
        let min = store
            .query(&QueryFilter::all())
            .first()
            .map(|e| e.start_time());
        assert!(min.is_none_or(|m| m + 1000 >= now));
    }
}

#[test]
fn snapshot_preserves_query_results() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = LongTermStore::in_memory();
    for _ in 0..800 {
        store.append(random_envelope(&mut rng)).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("snapshot.log");
    let manifest = store.export_snapshot(&snap).unwrap();
    assert_eq!(manifest.count, store.len());
    let fresh = LongTermStore::in_memory();
    fresh.import_snapshot(&snap).unwrap();
    let mut probe = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let f = random_filter(&mut probe);
        assert_eq!(fresh.query(&f), store.query(&f));
    }
}
