//! The measurement envelope and its line-oriented wire format.
//!
//! One envelope per line, space-separated `key=value` fields in a fixed order:
//!
//! ```text
//! id=<sha256 hex> kind=<latency|throughput|path> src=<host> dst=<host> agent=<host> start=<ms> stored=<ms> collected=<ms> <payload>
//! ```
//!
//! Payload fields by kind:
//!
//! ```text
//! latency     sent=<n> lost=<n> dmin=<ms|-> dmed=<ms|-> dp95=<ms|->
//! throughput  mbps=<f> retrans=<n> cwnd=<bytes>
//! path        hops=<node:rtt|*>,... (possibly empty) reached=<0|1> pmtu=<bytes|->
//! ```
//!
//! Numbers use the shortest decimal representation that round-trips
//! (Rust's `Display` for `f64`). Parsing is strict: a line is accepted only if
//! re-serializing the parsed envelope reproduces it byte for byte and the id
//! matches the payload hash.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::{HostId, NodeId, SimTime};
use crate::measurement::{
    DelayStats, LatencySample, Measurement, MetricKind, PathMeasurement, ThroughputResult, TraceHop,
};

/// A 256-bit content hash identifying one measurement.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecordId([u8; 32]);

impl RecordId {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Smallest possible id, for range bounds.
    pub const MIN: RecordId = RecordId([0; 32]);
    pub const MAX: RecordId = RecordId([0xff; 32]);
}

impl fmt::Display for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RecordId({})", &hex::encode(self.0)[..16])
    }
}

impl FromStr for RecordId {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)
            .map_err(|_| WireError::new(format!("bad record id {s:?}")))?;
        if s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(WireError::new("record id must be lowercase hex"));
        }
        Ok(RecordId(out))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed envelope: {reason}")]
pub struct WireError {
    pub reason: String,
}

impl WireError {
    fn new(reason: impl Into<String>) -> Self {
        Self {
            reason: reason.into(),
        }
    }
}

fn fmt_f64(out: &mut String, v: f64) {
    debug_assert!(v.is_finite());
    // -0.0 would print as "-0".
    let v = if v == 0.0 { 0.0 } else { v };
    write!(out, "{v}").unwrap();
}

fn fmt_opt_f64(out: &mut String, v: Option<f64>) {
    match v {
        Some(v) => fmt_f64(out, v),
        None => out.push('-'),
    }
}

/// Canonical serialization of a measurement: kind, endpoints, start time and
/// payload fields in fixed order. Excludes every collection-side field.
pub fn canonical_payload(m: &Measurement) -> String {
    let mut s = String::with_capacity(128);
    write!(
        s,
        "kind={} src={} dst={} start={}",
        m.kind(),
        m.src(),
        m.dst(),
        m.start_time()
    )
    .unwrap();
    write_payload_fields(&mut s, m);
    s
}

fn write_payload_fields(s: &mut String, m: &Measurement) {
    match m {
        Measurement::Latency(l) => {
            write!(s, " sent={} lost={}", l.packets_sent, l.packets_lost).unwrap();
            let d = l.delay;
            s.push_str(" dmin=");
            fmt_opt_f64(s, d.map(|d| d.min_ms));
            s.push_str(" dmed=");
            fmt_opt_f64(s, d.map(|d| d.median_ms));
            s.push_str(" dp95=");
            fmt_opt_f64(s, d.map(|d| d.p95_ms));
        }
        Measurement::Throughput(t) => {
            s.push_str(" mbps=");
            fmt_f64(s, t.achieved_mbps);
            write!(s, " retrans={} cwnd={}", t.retransmits, t.cwnd_final_bytes).unwrap();
        }
        Measurement::Path(p) => {
            s.push_str(" hops=");
            for (i, h) in p.hops.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                match (&h.node, h.rtt_ms) {
                    (Some(n), Some(rtt)) => {
                        write!(s, "{n}:").unwrap();
                        fmt_f64(s, rtt);
                    }
                    _ => s.push('*'),
                }
            }
            write!(s, " reached={}", u8::from(p.destination_reached)).unwrap();
            s.push_str(" pmtu=");
            match p.path_mtu {
                Some(m) => write!(s, "{m}").unwrap(),
                None => s.push('-'),
            }
        }
    }
}

/// Content hash of a measurement's canonical serialization.
pub fn dedup_key(m: &Measurement) -> RecordId {
    RecordId(Sha256::digest(canonical_payload(m).as_bytes()).into())
}

/// The unit flowing from collector through the bus into the stores.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementEnvelope {
    pub id: RecordId,
    /// Host whose agent produced and archived the measurement.
    pub agent: HostId,
    /// When the agent archived the measurement.
    pub stored_at: SimTime,
    /// When the record was handed to the collector.
    pub collected_at: SimTime,
    pub measurement: Measurement,
}

impl MeasurementEnvelope {
    pub fn new(
        agent: HostId,
        stored_at: SimTime,
        collected_at: SimTime,
        measurement: Measurement,
    ) -> Self {
        Self {
            id: dedup_key(&measurement),
            agent,
            stored_at,
            collected_at,
            measurement,
        }
    }

    pub fn kind(&self) -> MetricKind {
        self.measurement.kind()
    }

    pub fn src(&self) -> &HostId {
        self.measurement.src()
    }

    pub fn dst(&self) -> &HostId {
        self.measurement.dst()
    }

    pub fn start_time(&self) -> SimTime {
        self.measurement.start_time()
    }

    pub fn to_line(&self) -> String {
        let m = &self.measurement;
        let mut s = String::with_capacity(192);
        write!(
            s,
            "id={} kind={} src={} dst={} agent={} start={} stored={} collected={}",
            self.id,
            m.kind(),
            m.src(),
            m.dst(),
            self.agent,
            m.start_time(),
            self.stored_at,
            self.collected_at
        )
        .unwrap();
        write_payload_fields(&mut s, m);
        s
    }

    pub fn parse_line(line: &str) -> Result<Self, WireError> {
        let env = parse_fields(line)?;
        if env.id != dedup_key(&env.measurement) {
            return Err(WireError::new("id does not match payload"));
        }
        if env.to_line() != line {
            return Err(WireError::new("line is not in canonical form"));
        }
        Ok(env)
    }
}

struct Fields<'a> {
    it: std::str::Split<'a, char>,
}

impl<'a> Fields<'a> {
    fn take(&mut self, key: &str) -> Result<&'a str, WireError> {
        let tok = self
            .it
            .next()
            .ok_or_else(|| WireError::new(format!("missing field {key}")))?;
        match tok.split_once('=') {
            Some((k, v)) if k == key => Ok(v),
            _ => Err(WireError::new(format!(
                "expected field {key}, found {tok:?}"
            ))),
        }
    }

    fn num<T: FromStr>(&mut self, key: &str) -> Result<T, WireError> {
        let v = self.take(key)?;
        v.parse()
            .map_err(|_| WireError::new(format!("field {key}: bad number {v:?}")))
    }

    fn host(&mut self, key: &str) -> Result<HostId, WireError> {
        let v = self.take(key)?;
        let h = HostId::new(v);
        if !h.is_valid() {
            return Err(WireError::new(format!("field {key}: bad identifier {v:?}")));
        }
        Ok(h)
    }

    fn opt_f64(&mut self, key: &str) -> Result<Option<f64>, WireError> {
        let v = self.take(key)?;
        if v == "-" {
            Ok(None)
        } else {
            parse_f64(key, v).map(Some)
        }
    }

    fn f64(&mut self, key: &str) -> Result<f64, WireError> {
        let v = self.take(key)?;
        parse_f64(key, v)
    }

    fn finish(mut self) -> Result<(), WireError> {
        match self.it.next() {
            None => Ok(()),
            Some(tok) => Err(WireError::new(format!("unexpected trailing field {tok:?}"))),
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64, WireError> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(WireError::new(format!("field {key}: bad number {v:?}"))),
    }
}

fn parse_fields(line: &str) -> Result<MeasurementEnvelope, WireError> {
    let mut f = Fields {
        it: line.split(' '),
    };
    let id: RecordId = f.take("id")?.parse()?;
    let kind: MetricKind = f.take("kind")?.parse().map_err(WireError::new)?;
    let src = f.host("src")?;
    let dst = f.host("dst")?;
    let agent = f.host("agent")?;
    let start_time: SimTime = f.num("start")?;
    let stored_at: SimTime = f.num("stored")?;
    let collected_at: SimTime = f.num("collected")?;
    let measurement = match kind {
        MetricKind::Latency => {
            let packets_sent: u64 = f.num("sent")?;
            let packets_lost: u64 = f.num("lost")?;
            if packets_lost > packets_sent {
                return Err(WireError::new("lost exceeds sent"));
            }
            let dmin = f.opt_f64("dmin")?;
            let dmed = f.opt_f64("dmed")?;
            let dp95 = f.opt_f64("dp95")?;
            let delay = match (dmin, dmed, dp95) {
                (Some(min_ms), Some(median_ms), Some(p95_ms)) => Some(DelayStats {
                    min_ms,
                    median_ms,
                    p95_ms,
                }),
                (None, None, None) => None,
                _ => {
                    return Err(WireError::new(
                        "delay fields must be all present or all absent",
                    ))
                }
            };
            if delay.is_some() != (packets_lost < packets_sent) {
                return Err(WireError::new(
                    "delay presence disagrees with delivered count",
                ));
            }
            Measurement::Latency(LatencySample {
                src,
                dst,
                start_time,
                packets_sent,
                packets_lost,
                delay,
            })
        }
        MetricKind::Throughput => Measurement::Throughput(ThroughputResult {
            src,
            dst,
            start_time,
            achieved_mbps: f.f64("mbps")?,
            retransmits: f.num("retrans")?,
            cwnd_final_bytes: f.num("cwnd")?,
        }),
        MetricKind::Path => {
            let hops_field = f.take("hops")?;
            let mut hops = Vec::new();
            for h in hops_field.split(',').filter(|_| !hops_field.is_empty()) {
                if h == "*" {
                    hops.push(TraceHop::silent());
                    continue;
                }
                let (node, rtt) = h
                    .split_once(':')
                    .ok_or_else(|| WireError::new(format!("bad hop {h:?}")))?;
                let node = NodeId::new(node);
                if !node.is_valid() {
                    return Err(WireError::new(format!("bad hop node {h:?}")));
                }
                hops.push(TraceHop::answered(node, parse_f64("hops", rtt)?));
            }
            let destination_reached = match f.take("reached")? {
                "1" => true,
                "0" => false,
                other => return Err(WireError::new(format!("bad reached flag {other:?}"))),
            };
            let pmtu = f.take("pmtu")?;
            let path_mtu = if pmtu == "-" {
                None
            } else {
                Some(
                    pmtu.parse()
                        .map_err(|_| WireError::new(format!("bad pmtu {pmtu:?}")))?,
                )
            };
            if path_mtu.is_some() != destination_reached {
                return Err(WireError::new("pmtu presence disagrees with reached flag"));
            }
            Measurement::Path(PathMeasurement {
                src,
                dst,
                start_time,
                hops,
                destination_reached,
                path_mtu,
            })
        }
    };
    f.finish()?;
    Ok(MeasurementEnvelope {
        id,
        agent,
        stored_at,
        collected_at,
        measurement,
    })
}
