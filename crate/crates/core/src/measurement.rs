//! Measurement records produced by agents.

use std::fmt;
use std::str::FromStr;

use crate::ids::{HostId, NodeId, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetricKind {
    Latency,
    Throughput,
    Path,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [
        MetricKind::Latency,
        MetricKind::Throughput,
        MetricKind::Path,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Latency => "latency",
            MetricKind::Throughput => "throughput",
            MetricKind::Path => "path",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "latency" => Ok(MetricKind::Latency),
            "throughput" => Ok(MetricKind::Throughput),
            "path" => Ok(MetricKind::Path),
            other => Err(format!("unknown metric kind {other:?}")),
        }
    }
}

/// Delay quantiles over the delivered packets of a latency test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayStats {
    pub min_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

/// One-way latency and loss over a stream of probes.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencySample {
    pub src: HostId,
    pub dst: HostId,
    pub start_time: SimTime,
    pub packets_sent: u64,
    pub packets_lost: u64,
    /// Absent when every packet was lost.
    pub delay: Option<DelayStats>,
}

impl LatencySample {
    pub fn loss_fraction(&self) -> f64 {
        if self.packets_sent == 0 {
            return 0.0;
        }
        self.packets_lost as f64 / self.packets_sent as f64
    }

    pub fn delivered(&self) -> u64 {
        self.packets_sent - self.packets_lost
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputResult {
    pub src: HostId,
    pub dst: HostId,
    pub start_time: SimTime,
    pub achieved_mbps: f64,
    pub retransmits: u64,
    pub cwnd_final_bytes: u64,
}

/// One traceroute hop. Both fields are absent when no probe at this TTL answered.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceHop {
    pub node: Option<NodeId>,
    pub rtt_ms: Option<f64>,
}

impl TraceHop {
    pub fn answered(node: NodeId, rtt_ms: f64) -> Self {
        Self {
            node: Some(node),
            rtt_ms: Some(rtt_ms),
        }
    }

    pub fn silent() -> Self {
        Self {
            node: None,
            rtt_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathMeasurement {
    pub src: HostId,
    pub dst: HostId,
    pub start_time: SimTime,
    pub hops: Vec<TraceHop>,
    pub destination_reached: bool,
    /// Present iff the destination was reached.
    pub path_mtu: Option<u32>,
}

impl PathMeasurement {
    /// Reached the destination with every hop answering. Only complete traces
    /// take part in route comparison.
    pub fn is_complete(&self) -> bool {
        self.destination_reached && self.hops.iter().all(|h| h.node.is_some())
    }

    /// Hop node ids, `None` for silent hops.
    pub fn hop_nodes(&self) -> Vec<Option<NodeId>> {
        self.hops.iter().map(|h| h.node.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Measurement {
    Latency(LatencySample),
    Throughput(ThroughputResult),
    Path(PathMeasurement),
}

impl Measurement {
    pub fn kind(&self) -> MetricKind {
        match self {
            Measurement::Latency(_) => MetricKind::Latency,
            Measurement::Throughput(_) => MetricKind::Throughput,
            Measurement::Path(_) => MetricKind::Path,
        }
    }

    pub fn src(&self) -> &HostId {
        match self {
            Measurement::Latency(m) => &m.src,
            Measurement::Throughput(m) => &m.src,
            Measurement::Path(m) => &m.src,
        }
    }

    pub fn dst(&self) -> &HostId {
        match self {
            Measurement::Latency(m) => &m.dst,
            Measurement::Throughput(m) => &m.dst,
            Measurement::Path(m) => &m.dst,
        }
    }

    pub fn start_time(&self) -> SimTime {
        match self {
            Measurement::Latency(m) => m.start_time,
            Measurement::Throughput(m) => m.start_time,
            Measurement::Path(m) => m.start_time,
        }
    }
}

impl From<LatencySample> for Measurement {
    fn from(m: LatencySample) -> Self {
        Measurement::Latency(m)
    }
}

impl From<ThroughputResult> for Measurement {
    fn from(m: ThroughputResult) -> Self {
        Measurement::Throughput(m)
    }
}

impl From<PathMeasurement> for Measurement {
    fn from(m: PathMeasurement) -> Self {
        Measurement::Path(m)
    }
}
