//! End-to-end scenario runner.
//!
//! A scenario document names a topology and a mesh configuration (paths are
//! relative to the scenario file), a simulated duration, the collector's poll
//! period, analytics thresholds, store retention and a fault timeline:
//!
//! ```toml
//! topology = "topology.toml"
//! mesh = "mesh.toml"
//! duration_s = 3600
//! poll_period_s = 60
//!
//! [thresholds]
//! loss_abs = 0.02
//!
//! [retention]
//! short_term_s = 1800
//!
//! [[fault]]
//! kind = "link_loss"      # or route_change, bandwidth, halt_agent
//! at_s = 1200
//! from = "A"
//! to = "B"
//! loss = 0.1
//! ```
//!
//! The run advances in ticks of one poll period. Within a tick, tests due in
//! the previous period run against the simulator, results whose completion
//! time has passed are archived by their agent, the collector polls every
//! reachable agent in host order and publishes to the bus, and three sinks
//! (short-term store, long-term store, analyzer) drain their subscriptions on
//! separate threads. The short-term store is then pruned and agent freshness
//! is checked. Every step depends only on simulated time, so identical inputs
//! give byte-identical output files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, Endpoint, ThroughputLedger};
use crate::analytics::{Alert, Analyzer, Thresholds};
use crate::collector::{Bus, Collector, LocalEndpoint, TopicFilter};
use crate::envelope::MeasurementEnvelope;
use crate::ids::{secs, HostId, NodeId, SimClock, SimTime};
use crate::measurement::Measurement;
use crate::meshconfig::{next_due, MeshConfig, ScheduleEntry};
use crate::netsim::Topology;
use crate::store::{LongTermStore, MeasurementStore, QueryFilter, ShortTermStore, StoreError};

pub const SHORT_TERM_LOG: &str = "short_term.log";
pub const LONG_TERM_LOG: &str = "long_term.log";
pub const ALERT_LOG: &str = "alerts.log";
pub const RUN_META: &str = "run.toml";

/// 180 days.
pub const DEFAULT_RETENTION_S: u64 = 180 * 24 * 3600;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("output error on {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fault {
    RouteChange {
        at_s: u64,
        path: Vec<String>,
    },
    LinkLoss {
        at_s: u64,
        from: String,
        to: String,
        loss: f64,
        #[serde(default)]
        bidirectional: bool,
    },
    Bandwidth {
        at_s: u64,
        from: String,
        to: String,
        mbps: f64,
        #[serde(default)]
        bidirectional: bool,
    },
    HaltAgent {
        at_s: u64,
        host: String,
    },
}

impl Fault {
    pub fn at(&self) -> SimTime {
        secs(match self {
            Fault::RouteChange { at_s, .. }
            | Fault::LinkLoss { at_s, .. }
            | Fault::Bandwidth { at_s, .. }
            | Fault::HaltAgent { at_s, .. } => *at_s,
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetentionDoc {
    short_term_s: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    topology: PathBuf,
    mesh: PathBuf,
    duration_s: u64,
    #[serde(default = "default_poll")]
    poll_period_s: u64,
    #[serde(default)]
    thresholds: Thresholds,
    retention: Option<RetentionDoc>,
    #[serde(default, rename = "fault")]
    faults: Vec<Fault>,
}

fn default_poll() -> u64 {
    60
}

/// A validated scenario with faults already applied to the topology.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub topology: Arc<Topology>,
    pub mesh: MeshConfig,
    pub schedule: Vec<ScheduleEntry>,
    pub duration: SimTime,
    pub poll_period: SimTime,
    pub thresholds: Thresholds,
    pub retention: SimTime,
    pub faults: Vec<Fault>,
    pub halts: BTreeMap<HostId, SimTime>,
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    fs::read_to_string(path).map_err(|source| ScenarioError::Read {
        path: path.to_path_buf(),
        source,
    })
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let cfg_err = |reason: String| ScenarioError::Config {
            path: path.to_path_buf(),
            reason,
        };
        let doc: ScenarioDoc = toml::from_str(&read(path)?).map_err(|e| cfg_err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let topo_path = base.join(&doc.topology);
        let topology = Topology::parse(&read(&topo_path)?)
            .map_err(|e| cfg_err(format!("{}: {e}", topo_path.display())))?;
        let mesh_path = base.join(&doc.mesh);
        let mesh = MeshConfig::parse(&read(&mesh_path)?)
            .map_err(|e| cfg_err(format!("{}: {e}", mesh_path.display())))?;
        Self::new(
            topology,
            mesh,
            secs(doc.duration_s),
            secs(doc.poll_period_s),
            doc.thresholds,
            doc.retention
                .map_or(secs(DEFAULT_RETENTION_S), |r| secs(r.short_term_s)),
            doc.faults,
        )
        .map_err(cfg_err)
    }

    /// Validates the parts and applies the fault timeline.
    pub fn new(
        topology: Topology,
        mesh: MeshConfig,
        duration: SimTime,
        poll_period: SimTime,
        thresholds: Thresholds,
        retention: SimTime,
        faults: Vec<Fault>,
    ) -> Result<Self, String> {
        if duration == 0 || poll_period == 0 {
            return Err("duration_s and poll_period_s must be > 0".into());
        }
        if retention == 0 {
            return Err("retention must be > 0".into());
        }
        thresholds.validate().map_err(|e| e.to_string())?;
        mesh.check_topology(&topology).map_err(|e| e.to_string())?;
        let schedule = mesh.schedule().map_err(|e| e.to_string())?;
        for e in &schedule {
            let (s, d) = (
                &mesh.host(&e.src).expect("scheduled host").node,
                &mesh.host(&e.dst).expect("scheduled host").node,
            );
            if s != d {
                topology
                    .route_lookup(s, d, 0)
                    .map_err(|err| format!("test {}>{} ({}): {err}", e.src, e.dst, e.spec))?;
            }
        }

        let mut topo = topology;
        let mut halts = BTreeMap::new();
        for f in &faults {
            let at = f.at();
            let n = NodeId::new;
            topo = match f {
                Fault::RouteChange { path, .. } => {
                    topo.with_route_change(path.iter().map(n).collect(), at)
                }
                Fault::LinkLoss {
                    from,
                    to,
                    loss,
                    bidirectional,
                    ..
                } => topo
                    .with_link_loss(&n(from), &n(to), *loss, at)
                    .and_then(|t| {
                        if *bidirectional {
                            t.with_link_loss(&n(to), &n(from), *loss, at)
                        } else {
                            Ok(t)
                        }
                    }),
                Fault::Bandwidth {
                    from,
                    to,
                    mbps,
                    bidirectional,
                    ..
                } => topo
                    .with_link_bandwidth(&n(from), &n(to), *mbps, at)
                    .and_then(|t| {
                        if *bidirectional {
                            t.with_link_bandwidth(&n(to), &n(from), *mbps, at)
                        } else {
                            Ok(t)
                        }
                    }),
                Fault::HaltAgent { host, .. } => {
                    let h = HostId::new(host);
                    if mesh.host(&h).is_none() {
                        return Err(format!("halt_agent: unknown host {host:?}"));
                    }
                    let e = halts.entry(h).or_insert(at);
                    *e = (*e).min(at);
                    Ok(topo)
                }
            }
            .map_err(|e| format!("fault at {}s: {e}", at / 1000))?;
        }

        Ok(Self {
            topology: Arc::new(topo),
            mesh,
            schedule,
            duration,
            poll_period,
            thresholds,
            retention,
            faults,
            halts,
        })
    }

    fn halted(&self, h: &HostId, t: SimTime) -> bool {
        self.halts.get(h).is_some_and(|&at| at <= t)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunStats {
    /// Measurements archived by agents.
    pub produced: u64,
    /// Occurrences skipped because an endpoint's agent was halted.
    pub skipped: u64,
    /// Occurrences that failed in the simulator.
    pub failed: u64,
    pub polls: u64,
    pub failed_polls: u64,
    pub published: u64,
    pub pruned: u64,
    pub short_term_len: usize,
    pub long_term_len: usize,
    /// Ticks at which the retention window or the long-term superset
    /// property did not hold (only checked when requested).
    pub invariant_violations: u64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub stats: RunStats,
    pub alerts: Vec<Alert>,
    pub end: SimTime,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the scenario duration.
    pub duration: Option<SimTime>,
    /// Directory for store logs, the alert log and run metadata.
    pub output_dir: Option<PathBuf>,
    pub check_invariants: bool,
}

/// Metadata written next to the logs so reports can be rendered later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub end_ms: SimTime,
    pub poll_period_ms: SimTime,
    pub hosts: Vec<String>,
    pub shortest_interval_ms: BTreeMap<String, SimTime>,
    pub thresholds: Thresholds,
}

impl RunMeta {
    pub fn load(dir: &Path) -> Result<Self, ScenarioError> {
        let p = dir.join(RUN_META);
        toml::from_str(&read(&p)?).map_err(|e| ScenarioError::Config {
            path: p,
            reason: e.to_string(),
        })
    }
}

struct Pending {
    done: SimTime,
    src: HostId,
    m: Measurement,
}

fn out_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Output {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs `sc` to completion.
pub fn run(sc: &Scenario, opts: &RunOptions) -> Result<RunReport, ScenarioError> {
    let end = opts.duration.unwrap_or(sc.duration);
    let mut alert_out: Option<(PathBuf, BufWriter<File>)> = None;
    let (short, long) = match &opts.output_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(out_err(dir))?;
            for f in [SHORT_TERM_LOG, LONG_TERM_LOG, ALERT_LOG, RUN_META] {
                let p = dir.join(f);
                if p.exists() {
                    fs::remove_file(&p).map_err(out_err(&p))?;
                }
            }
            let ap = dir.join(ALERT_LOG);
            let w = BufWriter::new(File::create(&ap).map_err(out_err(&ap))?);
            alert_out = Some((ap, w));
            (
                ShortTermStore::open(&dir.join(SHORT_TERM_LOG), sc.retention)?,
                LongTermStore::open(&dir.join(LONG_TERM_LOG))?,
            )
        }
        None => (
            ShortTermStore::in_memory(sc.retention),
            LongTermStore::in_memory(),
        ),
    };

    let ledger = Arc::new(ThroughputLedger::new());
    let agents: BTreeMap<HostId, Arc<Agent>> = sc
        .mesh
        .hosts
        .iter()
        .map(|h| {
            let ep = Endpoint {
                host: h.id.clone(),
                node: h.node.clone(),
            };
            (
                h.id.clone(),
                Arc::new(Agent::new(ep, sc.topology.clone(), ledger.clone())),
            )
        })
        .collect();
    let clock = SimClock::new(0);
    let endpoints: Vec<LocalEndpoint> = agents
        .values()
        .map(|a| LocalEndpoint::new(a.clone(), clock.clone()))
        .collect();
    let intervals = sc.mesh.shortest_interval_by_agent();

    let bus = Bus::new();
    let mut subs = [
        bus.subscribe(TopicFilter::all()),
        bus.subscribe(TopicFilter::all()),
        bus.subscribe(TopicFilter::all()),
    ];
    let mut collector = Collector::new();
    let mut analyzer = Analyzer::new(sc.thresholds.clone());
    let mut latest: BTreeMap<HostId, SimTime> = BTreeMap::new();
    let mut pending: Vec<Pending> = Vec::new();
    let mut stats = RunStats::default();
    let mut alerts = Vec::new();

    let mut prev = 0;
    while prev < end {
        let now = (prev + sc.poll_period).min(end);

        for (h, a) in &agents {
            if sc.halted(h, now) && !a.is_halted() {
                info!("halting agent {h} at {now}");
                a.halt();
            }
        }

        for due in next_due(&sc.schedule, prev, now - prev) {
            let e = due.entry;
            if sc.halted(&e.src, due.at) || sc.halted(&e.dst, due.at) {
                stats.skipped += 1;
                continue;
            }
            let spec = &sc.mesh.specs[&e.spec];
            let dst = agents[&e.dst].endpoint().clone();
            match agents[&e.src].run_test(spec, &dst, due.at) {
                Ok(m) => pending.push(Pending {
                    done: due.at + e.duration_ms,
                    src: e.src.clone(),
                    m,
                }),
                Err(err) => {
                    warn!("{}>{} {} at {}: {err}", e.src, e.dst, e.spec, due.at);
                    stats.failed += 1;
                }
            }
        }

        pending.sort_by(|a, b| {
            (a.done, &a.src, a.m.start_time()).cmp(&(b.done, &b.src, b.m.start_time()))
        });
        let split = pending.partition_point(|p| p.done <= now);
        for p in pending.drain(..split) {
            let agent = &agents[&p.src];
            if sc.halted(&p.src, p.done) {
                continue;
            }
            agent
                .record(p.m, p.done)
                .map_err(|e| ScenarioError::Config {
                    path: PathBuf::new(),
                    reason: e.to_string(),
                })?;
            stats.produced += 1;
        }

        clock.advance_to(now);
        for ep in &endpoints {
            if let Err(e) = collector.poll_and_publish(ep, &bus) {
                debug!("poll failed at {now}: {e}");
            }
        }

        let [s_short, s_long, s_an] = &mut subs;
        let (short_res, long_res, tick_alerts) = std::thread::scope(|scope| {
            let short_h = scope.spawn(|| -> Result<(), StoreError> {
                for d in s_short.drain() {
                    short.append(MeasurementEnvelope::clone(&d.envelope))?;
                }
                Ok(())
            });
            let long_h = scope.spawn(|| -> Result<Vec<(HostId, SimTime)>, StoreError> {
                let mut fresh = Vec::new();
                for d in s_long.drain() {
                    fresh.push((d.envelope.agent.clone(), d.envelope.stored_at));
                    long.append(MeasurementEnvelope::clone(&d.envelope))?;
                }
                Ok(fresh)
            });
            let an = &mut analyzer;
            let an_h = scope.spawn(move || {
                s_an.drain()
                    .iter()
                    .flat_map(|d| an.ingest(&d.envelope))
                    .collect::<Vec<_>>()
            });
            (
                short_h.join().expect("short-term sink panicked"),
                long_h.join().expect("long-term sink panicked"),
                an_h.join().expect("analyzer panicked"),
            )
        });
        short_res?;
        for (h, t) in long_res? {
            let e = latest.entry(h).or_insert(t);
            *e = (*e).max(t);
        }

        stats.pruned += short.prune(now)? as u64;

        let k = u64::from(sc.thresholds.stale_k);
        let due_for_check: BTreeMap<HostId, SimTime> = intervals
            .iter()
            .filter(|(_, &iv)| now > k * iv)
            .map(|(h, &iv)| (h.clone(), iv))
            .collect();
        let stale = analyzer.check_freshness(&latest, now, &due_for_check);

        for a in tick_alerts.into_iter().chain(stale) {
            if let Some((p, w)) = alert_out.as_mut() {
                writeln!(w, "{}", a.to_line()).map_err(out_err(p))?;
            }
            alerts.push(a);
        }

        if opts.check_invariants && !invariants_hold(&short, &long, now) {
            stats.invariant_violations += 1;
        }
        prev = now;
    }

    let cs = collector.stats();
    stats.polls = cs.polls;
    stats.failed_polls = cs.failed_polls;
    stats.published = cs.published;
    stats.short_term_len = short.len();
    stats.long_term_len = long.len();
    short.flush()?;
    long.flush()?;

    if let Some(dir) = &opts.output_dir {
        if let Some((p, mut w)) = alert_out.take() {
            w.flush().map_err(out_err(&p))?;
        }
        let meta = RunMeta {
            end_ms: end,
            poll_period_ms: sc.poll_period,
            hosts: sc.mesh.hosts.iter().map(|h| h.id.to_string()).collect(),
            shortest_interval_ms: intervals.iter().map(|(h, v)| (h.to_string(), *v)).collect(),
            thresholds: sc.thresholds.clone(),
        };
        let p = dir.join(RUN_META);
        let text = toml::to_string(&meta).expect("run metadata serializes");
        fs::write(&p, text).map_err(out_err(&p))?;
    }
    info!(
        "run finished at {end}: produced={} published={} long_term={} alerts={}",
        stats.produced,
        stats.published,
        stats.long_term_len,
        alerts.len()
    );
    Ok(RunReport { stats, alerts, end })
}

fn invariants_hold(short: &ShortTermStore, long: &LongTermStore, now: SimTime) -> bool {
    let all = QueryFilter::all();
    let s = short.query(&all);
    let cutoff = now.saturating_sub(short.window());
    let window_ok = s.iter().all(|e| e.start_time() >= cutoff);
    let l: std::collections::HashSet<_> = long.query(&all).iter().map(|e| e.id).collect();
    window_ok && s.iter().all(|e| l.contains(&e.id))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOPO: &str = r#"
seed = 7
nodes = ["A", "B", "C", "D"]

[[link]]
from = "A"
to = "B"
latency_ms = 5
bandwidth_mbps = 100
mtu = 1500
bidirectional = true

[[link]]
from = "B"
to = "C"
latency_ms = 5
bandwidth_mbps = 100
mtu = 1500
bidirectional = true

[[link]]
from = "A"
to = "D"
latency_ms = 5
bandwidth_mbps = 100
mtu = 1500
bidirectional = true

[[link]]
from = "D"
to = "C"
latency_ms = 5
bandwidth_mbps = 100
mtu = 1500
bidirectional = true

[[route]]
path = ["A", "B"]
symmetric = true

[[route]]
path = ["A", "B", "C"]
symmetric = true

[[route]]
path = ["B", "C"]
symmetric = true
"#;

    const MESH: &str = r#"
[[host]]
id = "a"
node = "A"
site = "s1"

[[host]]
id = "b"
node = "B"
site = "s2"

[[host]]
id = "c"
node = "C"
site = "s3"

[[spec]]
name = "owamp"
tool = "latency"
packet_count = 100
packet_interval_ms = 10
payload_size = 64
repeat_interval_s = 60

[[spec]]
name = "trace"
tool = "trace"
max_ttl = 8
repeat_interval_s = 300

[[mesh]]
name = "m"
members = ["a", "b", "c"]
specs = ["owamp", "trace"]
"#;

    fn scenario(faults: Vec<Fault>) -> Scenario {
        Scenario::new(
            Topology::parse(TOPO).unwrap(),
            MeshConfig::parse(MESH).unwrap(),
            secs(3600),
            secs(60),
            Thresholds::default(),
            secs(600),
            faults,
        )
        .unwrap()
    }

    #[test]
    fn clean_run_has_no_alerts() {
        let r = run(
            &scenario(vec![]),
            &RunOptions {
                check_invariants: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.alerts.is_empty(), "{:?}", r.alerts);
        // 6 pairs × (60 latency + 12 trace).
        assert_eq!(r.stats.produced, 6 * 72);
        assert_eq!(r.stats.long_term_len as u64, r.stats.produced);
        assert!(r.stats.short_term_len < r.stats.long_term_len);
        assert_eq!(r.stats.invariant_violations, 0);
    }

    #[test]
    fn route_change_and_halt() {
        let r = run(
            &scenario(vec![
                Fault::RouteChange {
                    at_s: 1000,
                    path: vec!["A".into(), "D".into(), "C".into()],
                },
                Fault::HaltAgent {
                    at_s: 2000,
                    host: "b".into(),
                },
            ]),
            &RunOptions::default(),
        )
        .unwrap();
        let kinds: Vec<String> = r
            .alerts
            .iter()
            .map(|a| format!("{} {}", a.kind, a.subject))
            .collect();
        assert_eq!(kinds, ["route_change a>c", "stale_agent b"]);
        let stale = &r.alerts[1];
        assert!(
            stale.raised_at <= 2_000_000 + 4 * 60_000,
            "{}",
            stale.raised_at
        );
    }

    #[test]
    fn fault_parse() {
        let doc: ScenarioDoc = toml::from_str(
            r#"
topology = "t.toml"
mesh = "m.toml"
duration_s = 10
[[fault]]
kind = "bandwidth"
at_s = 5
from = "A"
to = "B"
mbps = 10
"#,
        )
        .unwrap();
        assert_eq!(doc.faults[0].at(), 5000);
        assert!(toml::from_str::<ScenarioDoc>("topology='t'\nmesh='m'\nduration_s=1\n[[fault]]\nkind='bandwidth'\nat_s=1\nfrom='A'\nto='B'\nmbps=1\nextra=2").is_err());
    }
}
