//! Findings over stored measurements and the alerts they raise.
//!
//! The rule functions in this module are pure: the same series and thresholds
//! always yield the same result. [`Analyzer`] wraps them into an incremental
//! engine that consumes envelopes in delivery order, keeps a bounded history
//! per (src, dst) pair and raises alerts edge-triggered: an alert is emitted
//! when a subject enters a bad state or escalates from warn to critical, and
//! the state clears once the rule stops firing.
//!
//! Alert log lines are tab separated:
//!
//! ```text
//! <raised_at ms>\t<kind>\t<severity>\t<subject>\t<key=value ...>
//! ```
//!
//! where `subject` is `src>dst` for pair alerts and a bare host id otherwise.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::envelope::{MeasurementEnvelope, RecordId};
use crate::ids::{HostId, NodeId, SimTime};
use crate::measurement::{LatencySample, Measurement, PathMeasurement, ThroughputResult};
use crate::stats::BaselineStats;

pub type Baseline = BaselineStats<f64>;

/// Content hash of an ordered hop list.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PathSignature {
    pub signature: [u8; 32],
    pub hops: Vec<Option<NodeId>>,
}

impl PathSignature {
    pub fn from_hops(hops: Vec<Option<NodeId>>) -> Self {
        let mut h = Sha256::new();
        for hop in &hops {
            match hop {
                Some(n) => {
                    h.update([1u8]);
                    h.update((n.as_str().len() as u32).to_be_bytes());
                    h.update(n.as_str().as_bytes());
                }
                None => h.update([0u8]),
            }
        }
        Self {
            signature: h.finalize().into(),
            hops,
        }
    }

    pub fn hex(&self) -> String {
        hex::encode(self.signature)
    }

    /// First 12 hex digits, for reports.
    pub fn short(&self) -> String {
        self.hex()[..12].to_string()
    }

    /// Hops joined with `,`; silent hops print as `*`.
    pub fn hop_list(&self) -> String {
        self.hops
            .iter()
            .map(|h| h.as_ref().map_or("*", |n| n.as_str()))
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl fmt::Debug for PathSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PathSignature({} [{}])", self.short(), self.hop_list())
    }
}

pub fn path_signature(pm: &PathMeasurement) -> PathSignature {
    PathSignature::from_hops(pm.hop_nodes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteChange {
    /// Start time of the first measurement on the new path.
    pub at: SimTime,
    pub old: PathSignature,
    pub new: PathSignature,
    /// Incomplete traces skipped between the two compared measurements.
    pub incomplete_between: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RouteChangeReport {
    pub events: Vec<RouteChange>,
    pub incomplete: usize,
}

/// Incremental adjacent-pair comparison over complete traces.
#[derive(Debug, Clone, Default)]
pub struct RouteTracker {
    last: Option<PathSignature>,
    incomplete_since: usize,
    incomplete_total: usize,
}

impl RouteTracker {
    pub fn observe(&mut self, pm: &PathMeasurement) -> Option<RouteChange> {
        if !pm.is_complete() {
            self.incomplete_since += 1;
            self.incomplete_total += 1;
            return None;
        }
        let sig = path_signature(pm);
        let skipped = std::mem::take(&mut self.incomplete_since);
        match self.last.replace(sig.clone()) {
            Some(old) if old != sig => Some(RouteChange {
                at: pm.start_time,
                old,
                new: sig,
                incomplete_between: skipped,
            }),
            _ => None,
        }
    }

    pub fn incomplete_total(&self) -> usize {
        self.incomplete_total
    }
}

/// One event per adjacent pair of complete traces whose signatures differ.
pub fn detect_route_changes(series: &[PathMeasurement]) -> RouteChangeReport {
    let mut t = RouteTracker::default();
    let events = series.iter().filter_map(|pm| t.observe(pm)).collect();
    RouteChangeReport {
        events,
        incomplete: t.incomplete_total(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathCount {
    pub signature: PathSignature,
    pub count: usize,
    pub first_seen: SimTime,
    pub last_seen: SimTime,
}

/// Complete traces in `[from, to)` grouped by signature, most frequent first,
/// ties broken by first appearance.
pub fn distinct_paths(series: &[PathMeasurement], from: SimTime, to: SimTime) -> Vec<PathCount> {
    let mut by_sig: HashMap<PathSignature, PathCount> = HashMap::new();
    for pm in series
        .iter()
        .filter(|pm| pm.start_time >= from && pm.start_time < to && pm.is_complete())
    {
        let sig = path_signature(pm);
        by_sig
            .entry(sig.clone())
            .and_modify(|c| {
                c.count += 1;
                c.first_seen = c.first_seen.min(pm.start_time);
                c.last_seen = c.last_seen.max(pm.start_time);
            })
            .or_insert(PathCount {
                signature: sig,
                count: 1,
                first_seen: pm.start_time,
                last_seen: pm.start_time,
            });
    }
    let mut out: Vec<PathCount> = by_sig.into_values().collect();
    out.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(a.first_seen.cmp(&b.first_seen))
            .then(a.signature.cmp(&b.signature))
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AlertKind {
    RouteChange,
    MtuViolation,
    LossAnomaly,
    ThroughputDegradation,
    StaleAgent,
}

impl AlertKind {
    pub const ALL: [AlertKind; 5] = [
        AlertKind::RouteChange,
        AlertKind::MtuViolation,
        AlertKind::LossAnomaly,
        AlertKind::ThroughputDegradation,
        AlertKind::StaleAgent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AlertKind::RouteChange => "route_change",
            AlertKind::MtuViolation => "mtu_violation",
            AlertKind::LossAnomaly => "loss_anomaly",
            AlertKind::ThroughputDegradation => "throughput_degradation",
            AlertKind::StaleAgent => "stale_agent",
        }
    }
}

impl fmt::Display for AlertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlertKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown alert kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Severity {
    Warn,
    Critical,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Warn => "warn",
            Severity::Critical => "critical",
        }
    }
}

impl FromStr for Severity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "warn" => Ok(Severity::Warn),
            "critical" => Ok(Severity::Critical),
            _ => Err(format!("unknown severity {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subject {
    Pair(HostId, HostId),
    Host(HostId),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Pair(s, d) => write!(f, "{s}>{d}"),
            Subject::Host(h) => write!(f, "{h}"),
        }
    }
}

impl FromStr for Subject {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let ok = |x: &str| crate::ids::is_valid_ident(x).then(|| HostId::new(x));
        match s.split_once('>') {
            Some((a, b)) => match (ok(a), ok(b)) {
                (Some(a), Some(b)) => Ok(Subject::Pair(a, b)),
                _ => Err(format!("bad subject {s:?}")),
            },
            None => ok(s)
                .map(Subject::Host)
                .ok_or_else(|| format!("bad subject {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alert {
    pub raised_at: SimTime,
    pub kind: AlertKind,
    pub severity: Severity,
    pub subject: Subject,
    /// Ordered `key=value` pairs. Values contain no whitespace.
    pub evidence: Vec<(String, String)>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("bad alert line: {0}")]
pub struct AlertParseError(pub String);

impl Alert {
    fn new(raised_at: SimTime, kind: AlertKind, severity: Severity, subject: Subject) -> Self {
        Self {
            raised_at,
            kind,
            severity,
            subject,
            evidence: Vec::new(),
        }
    }

    fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.evidence.push((key.to_string(), value.to_string()));
        self
    }

    pub fn evidence(&self, key: &str) -> Option<&str> {
        self.evidence
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_line(&self) -> String {
        let ev: Vec<String> = self
            .evidence
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.raised_at,
            self.kind,
            self.severity.as_str(),
            self.subject,
            ev.join(" ")
        )
    }

    pub fn parse_line(line: &str) -> Result<Self, AlertParseError> {
        let err = |m: &str| AlertParseError(m.to_string());
        let f: Vec<&str> = line.split('\t').collect();
        let [t, kind, sev, subject, ev] = f[..] else {
            return Err(err("expected 5 tab-separated fields"));
        };
        let mut evidence = Vec::new();
        for kv in ev.split(' ').filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| err("evidence item without '='"))?;
            evidence.push((k.to_string(), v.to_string()));
        }
        Ok(Self {
            raised_at: t.parse().map_err(|_| err("bad timestamp"))?,
            kind: kind.parse().map_err(|e: String| AlertParseError(e))?,
            severity: sev.parse().map_err(|e: String| AlertParseError(e))?,
            subject: subject.parse().map_err(|e: String| AlertParseError(e))?,
            evidence,
        })
    }
}

/// Tunable rule parameters, shared by alerting and status rendering.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Loss fraction at or above which a sample is critical.
    pub loss_abs: f64,
    /// Multiplier of the MAD for the statistical loss rule.
    pub loss_mad_k: f64,
    /// Number of prior samples forming the loss baseline.
    pub loss_window: usize,
    pub throughput_rel_drop: f64,
    pub throughput_window: usize,
    /// Staleness multiplier of an agent's shortest repeat interval.
    pub stale_k: u32,
    /// Expected path MTU in bytes; `0` disables the check.
    pub expected_mtu: u32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            loss_abs: 0.02,
            loss_mad_k: 5.0,
            loss_window: 20,
            throughput_rel_drop: 0.5,
            throughput_window: 10,
            stale_k: 3,
            expected_mtu: 1500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ThresholdError {
    #[error("threshold {0} out of range")]
    OutOfRange(&'static str),
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), ThresholdError> {
        let frac = |x: f64| x.is_finite() && x > 0.0 && x <= 1.0;
        if !frac(self.loss_abs) {
            return Err(ThresholdError::OutOfRange("loss_abs"));
        }
        if !(self.loss_mad_k.is_finite() && self.loss_mad_k >= 0.0) {
            return Err(ThresholdError::OutOfRange("loss_mad_k"));
        }
        if self.loss_window < crate::stats::MIN_BASELINE {
            return Err(ThresholdError::OutOfRange("loss_window"));
        }
        if !(frac(self.throughput_rel_drop) && self.throughput_rel_drop < 1.0) {
            return Err(ThresholdError::OutOfRange("throughput_rel_drop"));
        }
        if self.throughput_window < crate::stats::MIN_BASELINE {
            return Err(ThresholdError::OutOfRange("throughput_window"));
        }
        if self.stale_k < 1 {
            return Err(ThresholdError::OutOfRange("stale_k"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("baseline needs at least {needed} samples, have {have}")]
pub struct InsufficientBaseline {
    pub have: usize,
    pub needed: usize,
}

fn baseline_of(values: &[f64]) -> Result<Baseline, InsufficientBaseline> {
    Baseline::from_values(values).ok_or(InsufficientBaseline {
        have: values.len(),
        needed: crate::stats::MIN_BASELINE,
    })
}

pub fn loss_baseline(series: &[LatencySample]) -> Result<Baseline, InsufficientBaseline> {
    let f: Vec<f64> = series.iter().map(LatencySample::loss_fraction).collect();
    baseline_of(&f)
}

/// Severity of a loss fraction under the absolute and statistical rules.
pub fn classify_loss(f: f64, baseline: Option<&Baseline>, t: &Thresholds) -> Option<Severity> {
    if f >= t.loss_abs {
        Some(Severity::Critical)
    } else if baseline.is_some_and(|b| f > b.median + t.loss_mad_k * b.mad) {
        Some(Severity::Warn)
    } else {
        None
    }
}

/// Applies the loss rules to `sample`. Without a baseline only the absolute
/// rule is evaluated.
pub fn detect_loss_anomaly(
    sample: &LatencySample,
    baseline: Option<&Baseline>,
    t: &Thresholds,
    raised_at: SimTime,
) -> Option<Alert> {
    let f = sample.loss_fraction();
    let sev = classify_loss(f, baseline, t)?;
    let mut a = Alert::new(
        raised_at,
        AlertKind::LossAnomaly,
        sev,
        Subject::Pair(sample.src.clone(), sample.dst.clone()),
    )
    .with("start", sample.start_time)
    .with("f", f)
    .with("abs_threshold", t.loss_abs);
    a = match baseline {
        Some(b) => a
            .with("median", b.median)
            .with("mad", b.mad)
            .with("stat_threshold", b.median + t.loss_mad_k * b.mad)
            .with("window", b.n),
        None => a.with("baseline", "insufficient"),
    };
    Some(a)
}

/// Baseline from up to `window` results preceding the latest one.
pub fn throughput_baseline(
    series: &[ThroughputResult],
    window: usize,
) -> Result<Baseline, InsufficientBaseline> {
    let prior = &series[..series.len().saturating_sub(1)];
    let prior = &prior[prior.len().saturating_sub(window)..];
    let v: Vec<f64> = prior.iter().map(|r| r.achieved_mbps).collect();
    baseline_of(&v)
}

pub fn classify_throughput(latest: f64, baseline: &Baseline, rel_drop: f64) -> Option<Severity> {
    (latest < (1.0 - rel_drop) * baseline.median).then_some(Severity::Critical)
}

/// Compares the last element of `series` with the median of up to `window`
/// preceding results.
pub fn detect_throughput_degradation(
    series: &[ThroughputResult],
    t: &Thresholds,
    raised_at: SimTime,
) -> Result<Option<Alert>, InsufficientBaseline> {
    let Some(latest) = series.last() else {
        return Err(InsufficientBaseline {
            have: 0,
            needed: crate::stats::MIN_BASELINE,
        });
    };
    let b = throughput_baseline(series, t.throughput_window)?;
    Ok(
        classify_throughput(latest.achieved_mbps, &b, t.throughput_rel_drop).map(|sev| {
            Alert::new(
                raised_at,
                AlertKind::ThroughputDegradation,
                sev,
                Subject::Pair(latest.src.clone(), latest.dst.clone()),
            )
            .with("start", latest.start_time)
            .with("latest_mbps", latest.achieved_mbps)
            .with("baseline_median_mbps", b.median)
            .with("rel_drop", t.throughput_rel_drop)
            .with("threshold_mbps", (1.0 - t.throughput_rel_drop) * b.median)
            .with("window", b.n)
        }),
    )
}

/// Warns when a reached destination's path MTU is below `expected`.
pub fn check_path_mtu(pm: &PathMeasurement, expected: u32, raised_at: SimTime) -> Option<Alert> {
    let pmtu = pm.path_mtu?;
    (pmtu < expected).then(|| {
        Alert::new(
            raised_at,
            AlertKind::MtuViolation,
            Severity::Warn,
            Subject::Pair(pm.src.clone(), pm.dst.clone()),
        )
        .with("start", pm.start_time)
        .with("path_mtu", pmtu)
        .with("expected", expected)
        .with("hops", path_signature(pm).hop_list())
    })
}

pub fn route_change_alert(
    src: &HostId,
    dst: &HostId,
    ev: &RouteChange,
    raised_at: SimTime,
) -> Alert {
    Alert::new(
        raised_at,
        AlertKind::RouteChange,
        Severity::Warn,
        Subject::Pair(src.clone(), dst.clone()),
    )
    .with("at", ev.at)
    .with("old", ev.old.short())
    .with("new", ev.new.short())
    .with("old_hops", ev.old.hop_list())
    .with("new_hops", ev.new.hop_list())
    .with("incomplete_skipped", ev.incomplete_between)
    .with("threshold", "signature_differs")
}

/// Lag of `latest` behind `now`; `None` stands for "no data ever".
pub fn freshness_lag(latest: Option<SimTime>, now: SimTime) -> Option<SimTime> {
    latest.map(|t| now.saturating_sub(t))
}

pub fn is_stale(latest: Option<SimTime>, now: SimTime, k: u32, interval: SimTime) -> bool {
    freshness_lag(latest, now).is_none_or(|lag| lag > u64::from(k) * interval)
}

/// Stale-agent alerts for every agent in `intervals` (its shortest repeat
/// interval). Agents missing from `latest` have never produced data.
pub fn check_agent_freshness(
    latest: &BTreeMap<HostId, SimTime>,
    now: SimTime,
    k: u32,
    intervals: &BTreeMap<HostId, SimTime>,
) -> Vec<Alert> {
    intervals
        .iter()
        .filter(|(h, &iv)| is_stale(latest.get(*h).copied(), now, k, iv))
        .map(|(h, &iv)| {
            let lag = freshness_lag(latest.get(h).copied(), now);
            Alert::new(
                now,
                AlertKind::StaleAgent,
                Severity::Critical,
                Subject::Host(h.clone()),
            )
            .with(
                "lag",
                lag.map_or_else(|| "inf".to_string(), |l| l.to_string()),
            )
            .with("interval", iv)
            .with("k", k)
            .with("threshold", u64::from(k) * iv)
        })
        .collect()
}

type Pair = (HostId, HostId);

/// Incremental, edge-triggered alerting over a stream of envelopes.
pub struct Analyzer {
    thresholds: Thresholds,
    seen: HashSet<RecordId>,
    loss: HashMap<Pair, VecDeque<LatencySample>>,
    throughput: HashMap<Pair, VecDeque<ThroughputResult>>,
    routes: HashMap<Pair, RouteTracker>,
    state: HashMap<(AlertKind, Subject), Severity>,
}

impl Analyzer {
    pub fn new(thresholds: Thresholds) -> Self {
        Self {
            thresholds,
            seen: HashSet::new(),
            loss: HashMap::new(),
            throughput: HashMap::new(),
            routes: HashMap::new(),
            state: HashMap::new(),
        }
    }

    pub fn thresholds(&self) -> &Thresholds {
        &self.thresholds
    }

    /// Records the current verdict for a subject; true when it should raise.
    fn transition(&mut self, kind: AlertKind, subject: Subject, verdict: Option<Severity>) -> bool {
        let key = (kind, subject);
        match verdict {
            None => {
                self.state.remove(&key);
                false
            }
            Some(s) => {
                let prev = self.state.insert(key, s);
                prev.is_none_or(|p| s > p)
            }
        }
    }

    /// Evaluates one envelope. Envelopes already seen are ignored.
    pub fn ingest(&mut self, env: &MeasurementEnvelope) -> Vec<Alert> {
        if !self.seen.insert(env.id) {
            return Vec::new();
        }
        let at = env.collected_at;
        let t = self.thresholds.clone();
        let mut out = Vec::new();
        match &env.measurement {
            Measurement::Latency(s) => {
                let key = (s.src.clone(), s.dst.clone());
                let hist = self.loss.entry(key.clone()).or_default();
                let prior: Vec<LatencySample> = hist.iter().cloned().collect();
                hist.push_back(s.clone());
                if hist.len() > t.loss_window {
                    hist.pop_front();
                }
                let b = loss_baseline(&prior).ok();
                let alert = detect_loss_anomaly(s, b.as_ref(), &t, at);
                let subject = Subject::Pair(key.0, key.1);
                if self.transition(
                    AlertKind::LossAnomaly,
                    subject,
                    alert.as_ref().map(|a| a.severity),
                ) {
                    out.extend(alert);
                }
            }
            Measurement::Throughput(r) => {
                let key = (r.src.clone(), r.dst.clone());
                let hist = self.throughput.entry(key.clone()).or_default();
                hist.push_back(r.clone());
                let series: Vec<ThroughputResult> = hist.iter().cloned().collect();
                if hist.len() > t.throughput_window {
                    hist.pop_front();
                }
                if let Ok(alert) = detect_throughput_degradation(&series, &t, at) {
                    let subject = Subject::Pair(key.0, key.1);
                    let sev = alert.as_ref().map(|a| a.severity);
                    if self.transition(AlertKind::ThroughputDegradation, subject, sev) {
                        out.extend(alert);
                    }
                }
            }
            Measurement::Path(pm) => {
                let key = (pm.src.clone(), pm.dst.clone());
                if let Some(ev) = self.routes.entry(key.clone()).or_default().observe(pm) {
                    out.push(route_change_alert(&key.0, &key.1, &ev, at));
                }
                if pm.destination_reached && t.expected_mtu > 0 {
                    let alert = check_path_mtu(pm, t.expected_mtu, at);
                    let subject = Subject::Pair(key.0, key.1);
                    if self.transition(
                        AlertKind::MtuViolation,
                        subject,
                        alert.as_ref().map(|a| a.severity),
                    ) {
                        out.extend(alert);
                    }
                }
            }
        }
        out
    }

    /// Freshness pass at `now` over the agents in `intervals`.
    pub fn check_freshness(
        &mut self,
        latest: &BTreeMap<HostId, SimTime>,
        now: SimTime,
        intervals: &BTreeMap<HostId, SimTime>,
    ) -> Vec<Alert> {
        let stale = check_agent_freshness(latest, now, self.thresholds.stale_k, intervals);
        let stale_hosts: HashSet<&Subject> = stale.iter().map(|a| &a.subject).collect();
        let mut raise = Vec::new();
        for h in intervals.keys() {
            let subj = Subject::Host(h.clone());
            let verdict = stale_hosts.contains(&subj).then_some(Severity::Critical);
            raise.push(self.transition(AlertKind::StaleAgent, subj, verdict));
        }
        let raised: HashSet<Subject> = intervals
            .keys()
            .zip(raise)
            .filter(|(_, r)| *r)
            .map(|(h, _)| Subject::Host(h.clone()))
            .collect();
        stale
            .into_iter()
            .filter(|a| raised.contains(&a.subject))
            .collect()
    }
}
