//! The three measurement tools, run against the simulated network.

use rand::Rng;

use super::spec::{TestKind, TestSpec, Tool};
use super::AgentError;
use crate::ids::{HostId, NodeId, SimTime};
use crate::measurement::{DelayStats, LatencySample, PathMeasurement, ThroughputResult, TraceHop};
use crate::netsim::{DropReason, Probe, ResolvedPath, Topology, MAX_MTU, MIN_MTU};
use crate::stats;

/// A measurement endpoint: the host identity and where it attaches to the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub host: HostId,
    pub node: NodeId,
}

impl Endpoint {
    pub fn new(host: impl Into<HostId>, node: impl Into<NodeId>) -> Self {
        Self {
            host: host.into(),
            node: node.into(),
        }
    }
}

/// Don't-fragment search: start at the largest datagram and drop to the MTU
/// reported by each "fragmentation needed" reply. When every attempt at a
/// size is lost, step down to the next smaller [`mtu_ladder`] entry.
fn discover_path_mtu<R: Rng + ?Sized>(path: &ResolvedPath, rng: &mut R) -> u32 {
    let mut size = MAX_MTU;
    loop {
        let mut reply = None;
        for _ in 0..TRACE_ATTEMPTS {
            let out = path.transmit(Probe::new(size).dont_fragment(), rng);
            if out.delivered {
                return size;
            }
            if out.drop_reason == Some(DropReason::MtuExceeded) {
                reply = out.next_hop_mtu;
                break;
            }
        }
        size = match reply {
            Some(m) if m < size => m,
            _ => match mtu_ladder().into_iter().find(|&m| m < size) {
                Some(m) => m,
                None => return MIN_MTU,
            },
        };
    }
}

/// Descending fallback path-MTU candidates: jumbo sizes in 1000-byte steps, then
/// 1500 down to 600 in 100-byte steps, then the IPv4 minimum.
pub fn mtu_ladder() -> Vec<u32> {
    let mut v: Vec<u32> = (2..=9).rev().map(|k| k * 1000).collect();
    v.extend((6..=15).rev().map(|k| k * 100));
    v.push(MIN_MTU);
    v
}

/// Probes sent per TTL (and per MTU candidate) before giving up on random loss.
pub const TRACE_ATTEMPTS: usize = 3;
/// Size of traceroute probes.
pub const TRACE_PROBE_SIZE: u32 = 60;

fn stream(tool: Tool, src: &Endpoint, dst: &Endpoint, start: SimTime, spec_name: &str) -> String {
    format!(
        "{}/{}/{}/{}/{}",
        tool.as_str(),
        src.host,
        dst.host,
        start,
        spec_name
    )
}

fn wrong_tool(spec: &TestSpec, expected: Tool) -> AgentError {
    AgentError::WrongTool {
        spec: spec.name.clone(),
        expected,
        actual: spec.tool(),
    }
}

/// Sends `packet_count` probes spaced `packet_interval_ms` apart and
/// summarizes loss and nearest-rank delay quantiles.
pub fn run_latency_test(
    spec: &TestSpec,
    src: &Endpoint,
    dst: &Endpoint,
    topo: &Topology,
    start: SimTime,
) -> Result<LatencySample, AgentError> {
    let TestKind::Latency {
        packet_count,
        packet_interval_ms,
        payload_size,
    } = spec.kind
    else {
        return Err(wrong_tool(spec, Tool::Latency));
    };
    if packet_count == 0 {
        return Err(AgentError::InvalidTest(
            "latency test with zero packets".into(),
        ));
    }
    topo.route_lookup(&src.node, &dst.node, start)?;
    let mut rng = topo.rng_for(&stream(Tool::Latency, src, dst, start, &spec.name));
    let mut delays = Vec::with_capacity(packet_count as usize);
    for i in 0..u64::from(packet_count) {
        let t = start + i * packet_interval_ms;
        let out = topo.send_probe(&src.node, &dst.node, Probe::new(payload_size), t, &mut rng)?;
        if let Some(d) = out.one_way_delay_ms {
            delays.push(d);
        }
    }
    let packets_sent = u64::from(packet_count);
    let packets_lost = packets_sent - delays.len() as u64;
    let sorted = stats::sorted(&delays);
    let delay = (!sorted.is_empty()).then(|| DelayStats {
        min_ms: sorted[0],
        median_ms: stats::quantile_sorted(&sorted, 0.5).unwrap(),
        p95_ms: stats::quantile_sorted(&sorted, 0.95).unwrap(),
    });
    Ok(LatencySample {
        src: src.host.clone(),
        dst: dst.host.clone(),
        start_time: start,
        packets_sent,
        packets_lost,
        delay,
    })
}

/// Outcome of the segment-level transfer model, before it is wrapped in a
/// [`ThroughputResult`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferModel {
    pub bottleneck_mbps: f64,
    pub segments: u64,
    pub dropped: u64,
    pub cwnd_final_bytes: u64,
}

/// Fluid TCP transfer over one resolved path.
///
/// The sender pushes `segments = floor(bottleneck * duration / payload)`
/// segments. Each is lost independently with the path's end-to-end drop
/// probability; runs of deliveries are drawn as geometric gaps, which is the
/// same distribution as one Bernoulli trial per segment. The congestion window
/// `w` (in segments) starts at 1, grows as `w <- sqrt(w^2 + 2)` per delivered
/// segment (Reno congestion avoidance in closed form, so a run of `g`
/// deliveries gives `sqrt(w^2 + 2g)`), and halves on each loss with a floor of
/// one segment.
pub fn simulate_transfer<R: Rng + ?Sized>(
    bottleneck_mbps: f64,
    drop_prob: f64,
    duration_s: u64,
    payload_size: u32,
    rng: &mut R,
) -> TransferModel {
    let total_bytes = bottleneck_mbps * 1e6 / 8.0 * duration_s as f64;
    let segments = (total_bytes / f64::from(payload_size)).floor() as u64;
    let mut w = 1.0f64;
    let mut dropped = 0u64;
    let mut sent = 0u64;
    while sent < segments {
        let remaining = segments - sent;
        let gap = geometric_successes(drop_prob, rng).min(remaining);
        w = (w * w + 2.0 * gap as f64).sqrt();
        sent += gap;
        if sent < segments {
            // The segment ending the run is lost.
            dropped += 1;
            sent += 1;
            w = (w / 2.0).max(1.0);
        }
    }
    TransferModel {
        bottleneck_mbps,
        segments,
        dropped,
        cwnd_final_bytes: (w * f64::from(payload_size)).floor() as u64,
    }
}

/// Number of successes before the first failure, failure probability `p`.
fn geometric_successes<R: Rng + ?Sized>(p: f64, rng: &mut R) -> u64 {
    if p <= 0.0 {
        return u64::MAX;
    }
    if p >= 1.0 {
        return 0;
    }
    // U in (0, 1]; floor(ln U / ln(1 - p)) is Geometric(p) on {0, 1, ...}.
    let u = 1.0 - rng.random::<f64>();
    let g = (u.ln() / (1.0 - p).ln()).floor();
    if g >= u64::MAX as f64 {
        u64::MAX
    } else {
        g as u64
    }
}

pub fn run_throughput_test(
    spec: &TestSpec,
    src: &Endpoint,
    dst: &Endpoint,
    topo: &Topology,
    start: SimTime,
) -> Result<ThroughputResult, AgentError> {
    let TestKind::Throughput {
        duration_s,
        payload_size,
    } = spec.kind
    else {
        return Err(wrong_tool(spec, Tool::Throughput));
    };
    if duration_s == 0 {
        return Err(AgentError::InvalidTest(
            "throughput test with zero duration".into(),
        ));
    }
    if payload_size == 0 {
        return Err(AgentError::InvalidTest(
            "throughput test with zero payload".into(),
        ));
    }
    let path = topo.resolve_path(&src.node, &dst.node, start)?;
    let mut rng = topo.rng_for(&stream(Tool::Throughput, src, dst, start, &spec.name));
    let model = simulate_transfer(
        path.bottleneck_mbps(),
        1.0 - path.delivery_probability(),
        duration_s,
        payload_size,
        &mut rng,
    );
    let loss_fraction = if model.segments == 0 {
        0.0
    } else {
        model.dropped as f64 / model.segments as f64
    };
    Ok(ThroughputResult {
        src: src.host.clone(),
        dst: dst.host.clone(),
        start_time: start,
        achieved_mbps: model.bottleneck_mbps * (1.0 - loss_fraction),
        retransmits: model.dropped,
        cwnd_final_bytes: model.cwnd_final_bytes,
    })
}

/// Traceroute followed by a don't-fragment MTU probe ladder.
pub fn run_path_trace(
    src: &Endpoint,
    dst: &Endpoint,
    topo: &Topology,
    start: SimTime,
    max_ttl: u32,
) -> Result<PathMeasurement, AgentError> {
    if max_ttl == 0 {
        return Err(AgentError::InvalidTest("max_ttl must be >= 1".into()));
    }
    let path = topo.resolve_path(&src.node, &dst.node, start)?;
    let mut rng = topo.rng_for(&stream(Tool::Trace, src, dst, start, ""));
    let mut hops = Vec::new();
    let mut reached = false;
    for ttl in 1..=max_ttl {
        let mut hop = TraceHop::silent();
        for _ in 0..TRACE_ATTEMPTS {
            let out = path.transmit(Probe::new(TRACE_PROBE_SIZE).ttl(ttl), &mut rng);
            if out.delivered || out.drop_reason == Some(DropReason::TtlExpired) {
                hop = TraceHop::answered(out.stopped_at, 2.0 * out.elapsed_ms);
                reached = out.delivered;
                break;
            }
        }
        hops.push(hop);
        if reached {
            break;
        }
    }
    let path_mtu = reached.then(|| discover_path_mtu(&path, &mut rng));
    Ok(PathMeasurement {
        src: src.host.clone(),
        dst: dst.host.clone(),
        start_time: start,
        hops,
        destination_reached: reached,
        path_mtu,
    })
}
