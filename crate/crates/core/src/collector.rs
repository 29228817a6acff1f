//! Polls agent archives and publishes envelopes on a topic bus.
//!
//! Delivery is at-least-once: a poll asks for `stored_at >= last_seen`, so
//! records stored exactly at the cursor are re-delivered, and subscribers may
//! replay from an earlier offset. Sinks deduplicate by envelope id.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::agent::Agent;
pub use crate::envelope::{dedup_key, MeasurementEnvelope};
use crate::ids::{HostId, SimClock, SimTime};
use crate::measurement::MetricKind;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CollectorError {
    #[error("agent {0} unreachable: {1}")]
    Unreachable(HostId, String),
    #[error("agent {0} returned an error: {1}")]
    AgentResponse(HostId, String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BusError {
    #[error("bus is stopped")]
    Stopped,
    #[error("envelope of kind {actual} published on topic {topic}")]
    TopicMismatch {
        topic: MetricKind,
        actual: MetricKind,
    },
}

/// Something that answers agent protocol requests.
pub trait AgentEndpoint: Send + Sync {
    fn agent(&self) -> &HostId;

    /// Sends one request line and returns the response lines, the last of
    /// which starts with `ok` or `err`.
    fn request(&self, line: &str) -> Result<Vec<String>, CollectorError>;
}

/// In-process endpoint that runs requests through the agent's protocol handler.
pub struct LocalEndpoint {
    agent: Arc<Agent>,
    clock: SimClock,
}

impl LocalEndpoint {
    pub fn new(agent: Arc<Agent>, clock: SimClock) -> Self {
        Self { agent, clock }
    }
}

impl AgentEndpoint for LocalEndpoint {
    fn agent(&self) -> &HostId {
        self.agent.host()
    }

    fn request(&self, line: &str) -> Result<Vec<String>, CollectorError> {
        if self.agent.is_halted() {
            return Err(CollectorError::Unreachable(
                self.agent.host().clone(),
                "agent halted".into(),
            ));
        }
        Ok(self.agent.handle_request(line, self.clock.now()))
    }
}

/// TCP client for an agent served with [`crate::agent::serve_api`].
pub struct TcpEndpoint {
    agent: HostId,
    addr: SocketAddr,
    timeout: Duration,
    conn: Mutex<Option<BufReader<TcpStream>>>,
}

impl TcpEndpoint {
    pub fn new(agent: HostId, addr: SocketAddr) -> Self {
        Self {
            agent,
            addr,
            timeout: Duration::from_secs(5),
            conn: Mutex::new(None),
        }
    }

    fn exchange(
        &self,
        conn: &mut Option<BufReader<TcpStream>>,
        line: &str,
    ) -> io::Result<Vec<String>> {
        if conn.is_none() {
            let s = TcpStream::connect_timeout(&self.addr, self.timeout)?;
            s.set_read_timeout(Some(self.timeout))?;
            *conn = Some(BufReader::new(s));
        }
        let reader = conn.as_mut().expect("connected above");
        let stream = reader.get_mut();
        stream.write_all(line.as_bytes())?;
        stream.write_all(b"\n")?;
        stream.flush()?;
        let mut out = Vec::new();
        loop {
            let mut buf = String::new();
            if reader.read_line(&mut buf)? == 0 {
                return Err(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "connection closed",
                ));
            }
            let l = buf.trim_end_matches(['\n', '\r']).to_string();
            let last = l.starts_with("ok") || l.starts_with("err");
            out.push(l);
            if last {
                return Ok(out);
            }
        }
    }
}

impl AgentEndpoint for TcpEndpoint {
    fn agent(&self) -> &HostId {
        &self.agent
    }

    fn request(&self, line: &str) -> Result<Vec<String>, CollectorError> {
        let mut conn = self.conn.lock().expect("endpoint lock poisoned");
        self.exchange(&mut conn, line).map_err(|e| {
            *conn = None;
            CollectorError::Unreachable(self.agent.clone(), e.to_string())
        })
    }
}

/// Per-agent high-water mark of `stored_at` values seen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PollCursor {
    pub agent: HostId,
    pub last_seen: SimTime,
}

impl PollCursor {
    pub fn new(agent: HostId) -> Self {
        Self {
            agent,
            last_seen: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PollResult {
    pub envelopes: Vec<MeasurementEnvelope>,
    pub cursor: PollCursor,
    /// Response lines that failed to parse and were skipped.
    pub malformed: usize,
}

/// Fetches records with `stored_at >= cursor.last_seen`. On error the caller
/// keeps its old cursor.
pub fn poll_agent(
    cursor: &PollCursor,
    endpoint: &dyn AgentEndpoint,
) -> Result<PollResult, CollectorError> {
    let lines = endpoint.request(&format!("list_since {}", cursor.last_seen))?;
    let (status, records) = lines.split_last().ok_or_else(|| {
        CollectorError::AgentResponse(cursor.agent.clone(), "empty response".into())
    })?;
    if !status.starts_with("ok") {
        return Err(CollectorError::AgentResponse(
            cursor.agent.clone(),
            status.clone(),
        ));
    }
    let mut envelopes = Vec::with_capacity(records.len());
    let mut malformed = 0;
    let mut last_seen = cursor.last_seen;
    for line in records {
        match MeasurementEnvelope::parse_line(line) {
            Ok(env) if env.agent == cursor.agent => {
                last_seen = last_seen.max(env.stored_at);
                envelopes.push(env);
            }
            Ok(env) => {
                malformed += 1;
                log::warn!(
                    "agent {} served a record of agent {}; skipped",
                    cursor.agent,
                    env.agent
                );
            }
            Err(e) => {
                malformed += 1;
                log::warn!("agent {}: {e}; record skipped", cursor.agent);
            }
        }
    }
    Ok(PollResult {
        envelopes,
        cursor: PollCursor {
            agent: cursor.agent.clone(),
            last_seen,
        },
        malformed,
    })
}

/// Counters kept by [`Collector`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CollectorStats {
    pub polls: u64,
    pub failed_polls: u64,
    pub published: u64,
    pub malformed: u64,
}

/// Holds one cursor per agent and publishes everything it fetches.
#[derive(Debug, Default)]
pub struct Collector {
    cursors: BTreeMap<HostId, PollCursor>,
    stats: CollectorStats,
}

impl Collector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cursor(&self, agent: &HostId) -> PollCursor {
        self.cursors
            .get(agent)
            .cloned()
            .unwrap_or_else(|| PollCursor::new(agent.clone()))
    }

    pub fn stats(&self) -> &CollectorStats {
        &self.stats
    }

    /// Polls one agent and publishes its envelopes. Returns how many were published.
    pub fn poll_and_publish(
        &mut self,
        endpoint: &dyn AgentEndpoint,
        bus: &Bus,
    ) -> Result<usize, CollectorError> {
        let cursor = self.cursor(endpoint.agent());
        self.stats.polls += 1;
        let res = match poll_agent(&cursor, endpoint) {
            Ok(r) => r,
            Err(e) => {
                self.stats.failed_polls += 1;
                return Err(e);
            }
        };
        self.stats.malformed += res.malformed as u64;
        let mut n = 0;
        for env in res.envelopes {
            match bus.publish(env.kind(), env) {
                Ok(_) => n += 1,
                // The cursor is not advanced, so these records are fetched again.
                Err(e) => return Err(CollectorError::AgentResponse(cursor.agent, e.to_string())),
            }
        }
        self.stats.published += n as u64;
        debug_assert!(res.cursor.last_seen >= cursor.last_seen);
        self.cursors.insert(res.cursor.agent.clone(), res.cursor);
        Ok(n)
    }
}

/// Set of topics a subscriber wants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicFilter(BTreeSet<MetricKind>);

impl TopicFilter {
    pub fn all() -> Self {
        Self(MetricKind::ALL.into_iter().collect())
    }

    pub fn only(kind: MetricKind) -> Self {
        Self([kind].into_iter().collect())
    }

    pub fn matches(&self, kind: MetricKind) -> bool {
        self.0.contains(&kind)
    }
}

impl FromIterator<MetricKind> for TopicFilter {
    fn from_iter<I: IntoIterator<Item = MetricKind>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

#[derive(Default)]
struct BusState {
    log: Vec<(MetricKind, Arc<MeasurementEnvelope>)>,
    stopped: bool,
}

/// In-process topic bus backed by a retained log.
///
/// Offsets index the log; a subscription is just a filter plus the next offset
/// to read, so a restarted consumer replays from any earlier offset.
#[derive(Clone, Default)]
pub struct Bus {
    inner: Arc<(Mutex<BusState>, Condvar)>,
}

/// One delivered envelope and its log offset.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub offset: usize,
    pub envelope: Arc<MeasurementEnvelope>,
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&self, topic: MetricKind, env: MeasurementEnvelope) -> Result<usize, BusError> {
        if env.kind() != topic {
            return Err(BusError::TopicMismatch {
                topic,
                actual: env.kind(),
            });
        }
        let (lock, cv) = &*self.inner;
        let mut st = lock.lock().expect("bus lock poisoned");
        if st.stopped {
            return Err(BusError::Stopped);
        }
        st.log.push((topic, Arc::new(env)));
        cv.notify_all();
        Ok(st.log.len() - 1)
    }

    /// Subscribes from the start of the retained log.
    pub fn subscribe(&self, filter: TopicFilter) -> Subscription {
        self.subscribe_from(filter, 0)
    }

    /// Subscribes starting at log offset `from` (a replay cursor).
    pub fn subscribe_from(&self, filter: TopicFilter, from: usize) -> Subscription {
        Subscription {
            bus: self.clone(),
            filter,
            next: from,
        }
    }

    /// Stops accepting publishes. Subscribers drain what was published and then end.
    pub fn stop(&self) {
        let (lock, cv) = &*self.inner;
        lock.lock().expect("bus lock poisoned").stopped = true;
        cv.notify_all();
    }

    pub fn len(&self) -> usize {
        self.inner.0.lock().expect("bus lock poisoned").log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct Subscription {
    bus: Bus,
    filter: TopicFilter,
    next: usize,
}

impl Subscription {
    /// Offset of the next log entry this subscription will examine.
    pub fn position(&self) -> usize {
        self.next
    }

    fn scan(&mut self, st: &BusState) -> Option<Delivery> {
        while self.next < st.log.len() {
            let (topic, env) = &st.log[self.next];
            let offset = self.next;
            self.next += 1;
            if self.filter.matches(*topic) {
                return Some(Delivery {
                    offset,
                    envelope: env.clone(),
                });
            }
        }
        None
    }

    /// Next matching envelope if one is already published.
    pub fn try_next(&mut self) -> Option<Delivery> {
        let bus = self.bus.clone();
        let st = bus.inner.0.lock().expect("bus lock poisoned");
        self.scan(&st)
    }

    /// Drains everything currently available.
    pub fn drain(&mut self) -> Vec<Delivery> {
        let bus = self.bus.clone();
        let st = bus.inner.0.lock().expect("bus lock poisoned");
        std::iter::from_fn(|| self.scan(&st)).collect()
    }

    /// Waits up to `timeout` for the next matching envelope.
    pub fn next_timeout(&mut self, timeout: Duration) -> Option<Delivery> {
        let bus = self.bus.clone();
        let (lock, cv) = &*bus.inner;
        let deadline = std::time::Instant::now() + timeout;
        let mut st = lock.lock().expect("bus lock poisoned");
        loop {
            if let Some(d) = self.scan(&st) {
                return Some(d);
            }
            let now = std::time::Instant::now();
            if st.stopped || now >= deadline {
                return None;
            }
            st = cv
                .wait_timeout(st, deadline - now)
                .expect("bus lock poisoned")
                .0;
        }
    }
}

/// Blocks for each next envelope; ends once the bus is stopped and drained.
impl Iterator for Subscription {
    type Item = Delivery;

    fn next(&mut self) -> Option<Delivery> {
        let bus = self.bus.clone();
        let (lock, cv) = &*bus.inner;
        let mut st = lock.lock().expect("bus lock poisoned");
        loop {
            if let Some(d) = self.scan(&st) {
                return Some(d);
            }
            if st.stopped {
                return None;
            }
            st = cv.wait(st).expect("bus lock poisoned");
        }
    }
}
