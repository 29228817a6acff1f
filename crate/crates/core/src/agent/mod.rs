//! Measurement agent: runs tests against the simulated network, archives the
//! results locally and serves them over a line-oriented request protocol.
//!
//! Requests are single lines:
//!
//! * `list_since <ms>` returns every archived record with `stored_at >= ms` as
//!   envelope lines (see [`crate::envelope`]), then `ok count=<n>`.
//! * `health` returns `ok status=ok records=<n> latest=<ms|->`.
//!
//! Any other line yields `err <reason>`; the connection stays open. Every
//! response ends with exactly one line starting with `ok` or `err`.

mod api;
mod archive;
mod spec;
mod tools;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

pub use api::{serve_api, ApiServer};
pub use archive::{Archive, ArchiveRecord};
pub use spec::{TestKind, TestSpec, TestSpecDoc, Tool};
pub use tools::{
    mtu_ladder, run_latency_test, run_path_trace, run_throughput_test, simulate_transfer, Endpoint,
    TransferModel, TRACE_ATTEMPTS,
};

use crate::envelope::MeasurementEnvelope;
use crate::ids::{HostId, SimTime};
use crate::measurement::Measurement;
use crate::netsim::{NetsimError, Topology};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Network(#[from] NetsimError),
    #[error("spec {spec} is a {} test, expected {}", actual.as_str(), expected.as_str())]
    WrongTool {
        spec: String,
        expected: Tool,
        actual: Tool,
    },
    #[error("invalid test: {0}")]
    InvalidTest(String),
    #[error("host {host} already runs a throughput test overlapping [{start}, {end})")]
    ThroughputBusy {
        host: HostId,
        start: SimTime,
        end: SimTime,
    },
    #[error("archive storage error: {0}")]
    Storage(String),
}

/// Tracks throughput occupancy per host across all agents of a deployment.
///
/// At most one throughput test may involve a host (as source or destination)
/// at any instant. The scheduler guarantees this; the agents assert it here.
#[derive(Debug, Default)]
pub struct ThroughputLedger {
    busy: Mutex<HashMap<HostId, Vec<(SimTime, SimTime)>>>,
}

impl ThroughputLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Claims `[start, end)` for both hosts, or fails without claiming anything.
    pub fn reserve(
        &self,
        a: &HostId,
        b: &HostId,
        start: SimTime,
        end: SimTime,
    ) -> Result<(), AgentError> {
        let mut busy = self.busy.lock().expect("throughput ledger poisoned");
        for h in [a, b] {
            if let Some(iv) = busy.get(h) {
                if iv.iter().any(|&(s, e)| s < end && start < e) {
                    return Err(AgentError::ThroughputBusy {
                        host: h.clone(),
                        start,
                        end,
                    });
                }
            }
        }
        for h in [a, b] {
            busy.entry(h.clone()).or_default().push((start, end));
        }
        Ok(())
    }
}

/// One measurement agent bound to a host.
pub struct Agent {
    endpoint: Endpoint,
    topo: Arc<Topology>,
    archive: Archive,
    throughput: Arc<ThroughputLedger>,
    halted: AtomicBool,
}

impl Agent {
    pub fn new(endpoint: Endpoint, topo: Arc<Topology>, throughput: Arc<ThroughputLedger>) -> Self {
        Self {
            endpoint,
            topo,
            archive: Archive::new(),
            throughput,
            halted: AtomicBool::new(false),
        }
    }

    pub fn host(&self) -> &HostId {
        &self.endpoint.host
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    pub fn halt(&self) {
        self.halted.store(true, Ordering::SeqCst);
    }

    pub fn is_halted(&self) -> bool {
        self.halted.load(Ordering::SeqCst)
    }

    /// Runs one occurrence of `spec` towards `dst` starting at `start`.
    pub fn run_test(
        &self,
        spec: &TestSpec,
        dst: &Endpoint,
        start: SimTime,
    ) -> Result<Measurement, AgentError> {
        let src = &self.endpoint;
        Ok(match spec.kind {
            TestKind::Latency { .. } => run_latency_test(spec, src, dst, &self.topo, start)?.into(),
            TestKind::Throughput { .. } => {
                self.throughput
                    .reserve(&src.host, &dst.host, start, start + spec.duration_ms())?;
                run_throughput_test(spec, src, dst, &self.topo, start)?.into()
            }
            TestKind::Trace { max_ttl } => {
                run_path_trace(src, dst, &self.topo, start, max_ttl)?.into()
            }
        })
    }

    /// Archives a finished measurement.
    pub fn record(&self, m: Measurement, stored_at: SimTime) -> Result<ArchiveRecord, AgentError> {
        self.archive.store(m, stored_at)
    }

    /// Answers one protocol request line. `now` becomes the envelopes'
    /// collection time.
    pub fn handle_request(&self, line: &str, now: SimTime) -> Vec<String> {
        let line = line.trim_end_matches(['\r', '\n']);
        let mut words = line.split(' ');
        match (words.next(), words.next(), words.next()) {
            (Some("health"), None, None) => {
                let latest = self
                    .archive
                    .latest_stored_at()
                    .map_or_else(|| "-".to_string(), |t| t.to_string());
                vec![format!(
                    "ok status=ok records={} latest={latest}",
                    self.archive.len()
                )]
            }
            (Some("list_since"), Some(t), None) => match t.parse::<SimTime>() {
                Ok(t) => match self.archive.list_since(t) {
                    Ok(records) => {
                        let mut out: Vec<String> = records
                            .into_iter()
                            .map(|r| {
                                MeasurementEnvelope::new(
                                    self.host().clone(),
                                    r.stored_at,
                                    now,
                                    r.payload,
                                )
                                .to_line()
                            })
                            .collect();
                        out.push(format!("ok count={}", out.len()));
                        out
                    }
                    Err(e) => vec![format!("err {e}")],
                },
                Err(_) => vec![format!("err bad timestamp {t:?}")],
            },
            _ => vec![format!("err unknown request {:?}", truncate(line, 64))],
        }
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::NodeId;
    use crate::measurement::LatencySample;
    use crate::netsim::LinkSpec;

    fn topo() -> Arc<Topology> {
        fn n(s: &str) -> NodeId {
            NodeId::new(s)
        }
        let l = |f: &str, t: &str| LinkSpec {
            from: n(f),
            to: n(t),
            base_latency_ms: 1.0,
            jitter_max_ms: 0.0,
            loss_prob: 0.0,
            bandwidth_mbps: 100.0,
            mtu: 1500,
        };
        Arc::new(
            Topology::new(
                [n("A"), n("B")],
                vec![l("A", "B"), l("B", "A")],
                vec![vec![n("A"), n("B")], vec![n("B"), n("A")]],
                1,
            )
            .unwrap(),
        )
    }

    fn agent() -> Agent {
        Agent::new(
            Endpoint::new("a", "A"),
            topo(),
            Arc::new(ThroughputLedger::new()),
        )
    }

    fn sample(start: SimTime) -> Measurement {
        LatencySample {
            src: HostId::new("a"),
            dst: HostId::new("b"),
            start_time: start,
            packets_sent: 4,
            packets_lost: 4,
            delay: None,
        }
        .into()
    }

    #[test]
    fn list_since_protocol() {
        let a = agent();
        for t in [10, 20, 30] {
            a.record(sample(t), t).unwrap();
        }
        let resp = a.handle_request("list_since 0", 100);
        assert_eq!(resp.len(), 4);
        assert_eq!(resp[3], "ok count=3");
        let env = MeasurementEnvelope::parse_line(&resp[0]).unwrap();
        assert_eq!(env.collected_at, 100);
        assert_eq!(env.stored_at, 10);
        assert_eq!(
            a.handle_request("list_since 31", 100),
            vec!["ok count=0".to_string()]
        );
    }

    #[test]
    fn health_and_errors() {
        let a = agent();
        assert_eq!(
            a.handle_request("health", 0),
            vec!["ok status=ok records=0 latest=-"]
        );
        a.record(sample(0), 42).unwrap();
        assert_eq!(
            a.handle_request("health\r\n", 0),
            vec!["ok status=ok records=1 latest=42"]
        );
        assert!(a.handle_request("list_since x", 0)[0].starts_with("err "));
        assert!(a.handle_request("list_since", 0)[0].starts_with("err "));
        assert!(a.handle_request("drop tables", 0)[0].starts_with("err "));
        assert_eq!(a.handle_request("list_since 0", 0).len(), 2);
    }

    #[test]
    fn throughput_overlap_asserted() {
        let a = agent();
        let spec = TestSpec {
            name: "t".into(),
            kind: TestKind::Throughput {
                duration_s: 10,
                payload_size: 1500,
            },
            repeat_interval_s: 60,
            version: 1,
        };
        let b = Endpoint::new("b", "B");
        a.run_test(&spec, &b, 0).unwrap();
        assert!(matches!(
            a.run_test(&spec, &b, 5_000),
            Err(AgentError::ThroughputBusy { .. })
        ));
        a.run_test(&spec, &b, 10_000).unwrap();
    }
}
