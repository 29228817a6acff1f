use std::sync::Arc;
use std::thread;

use meshmon::agent::{serve_api, Agent, Endpoint, ThroughputLedger};
use meshmon::collector::{Bus, Collector, TcpEndpoint, TopicFilter};
use meshmon::ids::SimClock;
use meshmon::measurement::{LatencySample, PathMeasurement};
use meshmon::netsim::{LinkSpec, Topology};
use meshmon::store::{AppendOutcome, LongTermStore, MeasurementStore, QueryFilter};
use meshmon::{HostId, Measurement, MeasurementEnvelope, MetricKind, NodeId};

fn topo() -> Arc<Topology> {
    let l = |f: &str, t: &str| LinkSpec {
        from: NodeId::new(f),
        to: NodeId::new(t),
        base_latency_ms: 1.0,
        jitter_max_ms: 0.0,
        loss_prob: 0.0,
        bandwidth_mbps: 100.0,
        mtu: 1500,
    };
    Arc::new(
        Topology::new(
            [NodeId::new("A"), NodeId::new("B")],
            [l("A", "B"), l("B", "A")],
            [vec![NodeId::new("A"), NodeId::new("B")]],
            3,
        )
        .unwrap(),
    )
}

fn sample(i: u64) -> Measurement {
    LatencySample {
        src: HostId::new("a"),
        dst: HostId::new("b"),
        start_time: i * 1000,
        packets_sent: 10,
        packets_lost: 10,
        delay: None,
    }
    .into()
}

#[test]
fn tcp_agent_api_round_trip() {
    let agent = Arc::new(Agent::new(
        Endpoint::new("a", "A"),
        topo(),
        Arc::new(ThroughputLedger::new()),
    ));
    for i in 0..3 {
        agent.record(sample(i), i * 1000 + 500).unwrap();
    }
    let clock = SimClock::new(10_000);
    let server = serve_api(agent.clone(), "127.0.0.1:0", clock).unwrap();
    let ep = TcpEndpoint::new(HostId::new("a"), server.local_addr());

    use meshmon::collector::AgentEndpoint;
    let garbage = ep.request("hello there").unwrap();
    assert!(garbage[0].starts_with("err "));
    let health = ep.request("health").unwrap();
    assert_eq!(health, vec!["ok status=ok records=3 latest=2500"]);

    let bus = Bus::new();
    let mut sub = bus.subscribe(TopicFilter::only(MetricKind::Latency));
    let mut collector = Collector::new();
    assert_eq!(collector.poll_and_publish(&ep, &bus).unwrap(), 3);
    assert_eq!(collector.cursor(&HostId::new("a")).last_seen, 2500);
    // The boundary record is delivered again; the store drops it.
    assert_eq!(collector.poll_and_publish(&ep, &bus).unwrap(), 1);

    let store = LongTermStore::in_memory();
    let outcomes: Vec<_> = sub
        .drain()
        .into_iter()
        .map(|d| {
            store
                .append(MeasurementEnvelope::clone(&d.envelope))
                .unwrap()
        })
        .collect();
    assert_eq!(
        outcomes
            .iter()
            .filter(|o| **o == AppendOutcome::Duplicate)
            .count(),
        1
    );
    assert_eq!(store.len(), 3);
    let e = &store.query(&QueryFilter::all())[0];
    assert_eq!((e.stored_at, e.collected_at), (500, 10_000));

    agent.halt();
    let before = collector.cursor(&HostId::new("a"));
    assert!(collector.poll_and_publish(&ep, &bus).is_err());
    assert_eq!(collector.cursor(&HostId::new("a")), before);
    server.shutdown();
}

#[test]
fn fan_out_respects_topics() {
    let bus = Bus::new();
    let lat1 = bus.subscribe(TopicFilter::only(MetricKind::Latency));
    let lat2 = bus.subscribe(TopicFilter::only(MetricKind::Latency));
    let path = bus.subscribe(TopicFilter::only(MetricKind::Path));
    let pm: Measurement = PathMeasurement {
        src: HostId::new("a"),
        dst: HostId::new("b"),
        start_time: 0,
        hops: vec![],
        destination_reached: false,
        path_mtu: None,
    }
    .into();
    for i in 0..10 {
        let env = MeasurementEnvelope::new(HostId::new("a"), i, i, sample(i));
        bus.publish(MetricKind::Latency, env).unwrap();
    }
    bus.publish(
        MetricKind::Path,
        MeasurementEnvelope::new(HostId::new("a"), 0, 0, pm),
    )
    .unwrap();
    bus.stop();
    assert_eq!(lat1.count(), 10);
    assert_eq!(lat2.count(), 10);
    assert_eq!(path.count(), 1);
}

#[test]
fn crash_and_replay_keeps_exactly_once() {
    let bus = Bus::new();
    let store = Arc::new(LongTermStore::in_memory());
    let first = bus.subscribe(TopicFilter::all());

    let publisher = {
        let bus = bus.clone();
        thread::spawn(move || {
            for i in 0..1000u64 {
                let env = MeasurementEnvelope::new(HostId::new("a"), i, i, sample(i));
                bus.publish(MetricKind::Latency, env.clone()).unwrap();
                if i % 7 == 0 {
                    // Forced duplicate, as an overlapping poll would produce.
                    bus.publish(MetricKind::Latency, env).unwrap();
                }
            }
            bus.stop();
        })
    };

    // Consume part of the stream, then crash without committing the last batch.
    let mut committed = 0;
    let mut sub = first;
    for (n, d) in sub.by_ref().enumerate() {
        if n >= 400 {
            break;
        }
        store
            .append(MeasurementEnvelope::clone(&d.envelope))
            .unwrap();
        committed = d.offset + 1;
    }
    drop(sub);
    let replay = bus.subscribe_from(TopicFilter::all(), committed.saturating_sub(50));
    for d in replay {
        store
            .append(MeasurementEnvelope::clone(&d.envelope))
            .unwrap();
    }
    publisher.join().unwrap();
    assert_eq!(store.len(), 1000);
    assert_eq!(bus.len(), 1000 + 143);
}
