//! Central configuration: hosts, test specs, meshes, and the generated schedule.
//!
//! The mesh configuration document is TOML:
//!
//! ```toml
//! [[host]]
//! id = "cern"
//! node = "A"
//! site = "CERN"
//! segment = "LHCOPN"      # LHCOPN | LHCONE | other (default)
//! latitude = 46.23
//! longitude = 6.05
//!
//! [[spec]]
//! name = "owamp"
//! tool = "latency"        # latency | throughput | trace
//! packet_count = 600
//! packet_interval_ms = 50
//! payload_size = 100
//! repeat_interval_s = 60
//!
//! [[mesh]]
//! name = "wlcg"
//! members = ["cern", "fnal", "bnl"]
//! specs = ["owamp"]
//! topology = "full_mesh"  # or "disjoint" together with pairs = [["cern", "fnal"]]
//! ```
//!
//! Scheduling: latency and trace entries start at
//! `pair_index * floor(repeat / pair_count)`. Throughput entries are placed
//! greedily (first fit, pairs in lexical order) on per-host busy timelines
//! over the hyperperiod of all throughput repeat intervals, so that no host
//! takes part in two overlapping throughput occurrences.

use std::collections::{BTreeMap, HashMap, HashSet};

use num_integer::Integer;
use serde::Deserialize;
use thiserror::Error;

use crate::agent::{TestSpec, TestSpecDoc, Tool};
use crate::ids::{HostId, NodeId, SimTime};
use crate::netsim::Topology;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshConfigError {
    #[error("mesh config parse error: {0}")]
    Parse(String),
    #[error("duplicate host id {0}")]
    DuplicateHost(HostId),
    #[error("invalid host {host}: {reason}")]
    InvalidHost { host: String, reason: String },
    #[error("mesh {mesh} references unknown host {host}")]
    UnknownHost { mesh: String, host: String },
    #[error("mesh {mesh} references unknown spec {spec}")]
    UnknownSpec { mesh: String, spec: String },
    #[error("invalid spec {spec}: {reason}")]
    InvalidSpec { spec: String, reason: String },
    #[error("invalid mesh {mesh}: {reason}")]
    InvalidMesh { mesh: String, reason: String },
    #[error("host {host} is attached to node {node}, which is not in the topology")]
    UnknownNode { host: HostId, node: NodeId },
    #[error("infeasible schedule: host {host} {reason}")]
    Infeasible { host: HostId, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HostRecord {
    pub id: HostId,
    pub node: NodeId,
    pub site: String,
    pub segment: String,
    pub latitude: f64,
    pub longitude: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MeshTopology {
    FullMesh,
    Disjoint(Vec<(HostId, HostId)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshDefinition {
    pub name: String,
    pub members: Vec<HostId>,
    pub specs: Vec<String>,
    pub topology: MeshTopology,
}

/// A validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshConfig {
    pub hosts: Vec<HostRecord>,
    pub specs: BTreeMap<String, TestSpec>,
    pub meshes: Vec<MeshDefinition>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    #[serde(default, rename = "host")]
    hosts: Vec<HostDoc>,
    #[serde(default, rename = "spec")]
    specs: Vec<TestSpecDoc>,
    #[serde(default, rename = "mesh")]
    meshes: Vec<MeshDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HostDoc {
    id: String,
    node: String,
    #[serde(default)]
    site: String,
    #[serde(default = "default_segment")]
    segment: String,
    #[serde(default)]
    latitude: f64,
    #[serde(default)]
    longitude: f64,
}

fn default_segment() -> String {
    "other".into()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MeshDoc {
    name: String,
    members: Vec<String>,
    specs: Vec<String>,
    #[serde(default = "default_mesh_topology")]
    topology: String,
    #[serde(default)]
    pairs: Vec<(String, String)>,
}

fn default_mesh_topology() -> String {
    "full_mesh".into()
}

impl MeshConfig {
    /// Parses and validates a configuration document.
    pub fn parse(text: &str) -> Result<Self, MeshConfigError> {
        let doc: ConfigDoc =
            toml::from_str(text).map_err(|e| MeshConfigError::Parse(e.to_string()))?;

        let mut hosts = Vec::new();
        let mut seen = HashSet::new();
        for h in doc.hosts {
            let id = HostId::new(&h.id);
            if !id.is_valid() {
                return Err(MeshConfigError::InvalidHost {
                    host: h.id,
                    reason: "identifier contains invalid characters".into(),
                });
            }
            if !(-90.0..=90.0).contains(&h.latitude) || !(-180.0..=180.0).contains(&h.longitude) {
                return Err(MeshConfigError::InvalidHost {
                    host: h.id,
                    reason: "coordinates out of range".into(),
                });
            }
            if !seen.insert(id.clone()) {
                return Err(MeshConfigError::DuplicateHost(id));
            }
            hosts.push(HostRecord {
                id,
                node: NodeId::new(&h.node),
                site: h.site,
                segment: h.segment,
                latitude: h.latitude,
                longitude: h.longitude,
            });
        }

        let mut specs = BTreeMap::new();
        for s in doc.specs {
            let name = s.name.clone();
            let spec = s
                .into_spec()
                .map_err(|reason| MeshConfigError::InvalidSpec {
                    spec: name.clone(),
                    reason,
                })?;
            if specs.insert(name.clone(), spec).is_some() {
                return Err(MeshConfigError::InvalidSpec {
                    spec: name,
                    reason: "declared twice".into(),
                });
            }
        }

        let mut meshes = Vec::new();
        for m in doc.meshes {
            let host_ref = |h: &str| {
                if seen.contains(h) {
                    Ok(HostId::new(h))
                } else {
                    Err(MeshConfigError::UnknownHost {
                        mesh: m.name.clone(),
                        host: h.to_string(),
                    })
                }
            };
            let members = m
                .members
                .iter()
                .map(|h| host_ref(h))
                .collect::<Result<Vec<_>, _>>()?;
            let bad_mesh = |reason: &str| MeshConfigError::InvalidMesh {
                mesh: m.name.clone(),
                reason: reason.into(),
            };
            if members.len() < 2 {
                return Err(bad_mesh("needs at least two members"));
            }
            if members.iter().collect::<HashSet<_>>().len() != members.len() {
                return Err(bad_mesh("member listed twice"));
            }
            for s in &m.specs {
                if !specs.contains_key(s) {
                    return Err(MeshConfigError::UnknownSpec {
                        mesh: m.name.clone(),
                        spec: s.clone(),
                    });
                }
            }
            let topology = match m.topology.as_str() {
                "full_mesh" => {
                    if !m.pairs.is_empty() {
                        return Err(bad_mesh("pairs only apply to disjoint meshes"));
                    }
                    MeshTopology::FullMesh
                }
                "disjoint" => {
                    let mut pairs = Vec::new();
                    for (a, b) in &m.pairs {
                        let (a, b) = (host_ref(a)?, host_ref(b)?);
                        if a == b {
                            return Err(bad_mesh("pair with identical endpoints"));
                        }
                        if !members.contains(&a) || !members.contains(&b) {
                            return Err(bad_mesh("pair endpoint is not a mesh member"));
                        }
                        pairs.push((a, b));
                    }
                    if pairs.is_empty() {
                        return Err(bad_mesh("disjoint mesh without pairs"));
                    }
                    MeshTopology::Disjoint(pairs)
                }
                other => return Err(bad_mesh(&format!("unknown topology {other:?}"))),
            };
            meshes.push(MeshDefinition {
                name: m.name,
                members,
                specs: m.specs,
                topology,
            });
        }

        Ok(MeshConfig {
            hosts,
            specs,
            meshes,
        })
    }

    /// Checks that every host attaches to a node of `topo`.
    pub fn check_topology(&self, topo: &Topology) -> Result<(), MeshConfigError> {
        for h in &self.hosts {
            if !topo.contains_node(&h.node) {
                return Err(MeshConfigError::UnknownNode {
                    host: h.id.clone(),
                    node: h.node.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn host(&self, id: &HostId) -> Option<&HostRecord> {
        self.hosts.iter().find(|h| &h.id == id)
    }

    /// Every (pair, spec) demand across all meshes, deduplicated, in
    /// declaration order.
    pub fn demands(&self) -> Vec<Demand<'_>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for mesh in &self.meshes {
            for (src, dst) in expand_mesh(mesh) {
                for s in &mesh.specs {
                    if seen.insert((src.clone(), dst.clone(), s.clone())) {
                        out.push(Demand {
                            src: src.clone(),
                            dst: dst.clone(),
                            spec: &self.specs[s],
                        });
                    }
                }
            }
        }
        out
    }

    /// Builds the schedule for all meshes.
    pub fn schedule(&self) -> Result<Vec<ScheduleEntry>, MeshConfigError> {
        build_schedule(&self.demands())
    }

    /// Shortest repeat interval among the tests each host runs as source.
    pub fn shortest_interval_by_agent(&self) -> BTreeMap<HostId, SimTime> {
        let mut out: BTreeMap<HostId, SimTime> = BTreeMap::new();
        for d in self.demands() {
            let r = d.spec.repeat_interval_ms();
            out.entry(d.src)
                .and_modify(|v| *v = (*v).min(r))
                .or_insert(r);
        }
        out
    }
}

/// Ordered (src, dst) pairs a mesh tests.
pub fn expand_mesh(mesh: &MeshDefinition) -> Vec<(HostId, HostId)> {
    match &mesh.topology {
        MeshTopology::FullMesh => {
            let mut pairs = Vec::with_capacity(mesh.members.len() * (mesh.members.len() - 1));
            for a in &mesh.members {
                for b in &mesh.members {
                    if a != b {
                        pairs.push((a.clone(), b.clone()));
                    }
                }
            }
            pairs
        }
        MeshTopology::Disjoint(pairs) => pairs.clone(),
    }
}

/// One test to schedule: `spec` from `src` to `dst`.
#[derive(Debug, Clone, PartialEq)]
pub struct Demand<'a> {
    pub src: HostId,
    pub dst: HostId,
    pub spec: &'a TestSpec,
}

/// A recurring test occurrence series: `first_start + k * repeat_interval`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleEntry {
    pub src: HostId,
    pub dst: HostId,
    pub spec: String,
    pub tool: Tool,
    pub duration_ms: SimTime,
    pub first_start: SimTime,
    pub repeat_interval_ms: SimTime,
}

impl ScheduleEntry {
    /// Occurrence start times in `[from, to)`.
    pub fn occurrences(&self, from: SimTime, to: SimTime) -> impl Iterator<Item = SimTime> + '_ {
        let k0 = if from <= self.first_start {
            0
        } else {
            (from - self.first_start).div_ceil(self.repeat_interval_ms)
        };
        (k0..)
            .map(move |k| self.first_start + k * self.repeat_interval_ms)
            .take_while(move |&t| t < to)
    }
}

/// An occurrence due within a polling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Due<'a> {
    pub entry: &'a ScheduleEntry,
    pub at: SimTime,
}

/// Occurrences in `[now, now + horizon)`, ordered by time then schedule position.
pub fn next_due(schedule: &[ScheduleEntry], now: SimTime, horizon: SimTime) -> Vec<Due<'_>> {
    let end = now.saturating_add(horizon);
    let mut due: Vec<(SimTime, usize)> = schedule
        .iter()
        .enumerate()
        .flat_map(|(i, e)| e.occurrences(now, end).map(move |t| (t, i)))
        .collect();
    due.sort_unstable();
    due.into_iter()
        .map(|(at, i)| Due {
            entry: &schedule[i],
            at,
        })
        .collect()
}

/// Busy intervals of one host on the hyperperiod circle `[0, period)`.
#[derive(Default)]
struct Timeline {
    busy: Vec<(SimTime, SimTime)>,
}

impl Timeline {
    fn overlaps(&self, start: SimTime, len: SimTime, period: SimTime) -> bool {
        let segs = circle_segments(start, len, period);
        self.busy
            .iter()
            .any(|&(s, e)| segs.iter().any(|&(a, b)| a < e && s < b))
    }

    fn add(&mut self, start: SimTime, len: SimTime, period: SimTime) {
        self.busy.extend(circle_segments(start, len, period));
    }
}

fn circle_segments(start: SimTime, len: SimTime, period: SimTime) -> Vec<(SimTime, SimTime)> {
    let s = start % period;
    if s + len <= period {
        vec![(s, s + len)]
    } else {
        vec![(s, period), (0, s + len - period)]
    }
}

/// Builds the schedule for `demands`. Output order follows input order.
pub fn build_schedule(demands: &[Demand<'_>]) -> Result<Vec<ScheduleEntry>, MeshConfigError> {
    let mut entries: Vec<ScheduleEntry> = demands
        .iter()
        .map(|d| ScheduleEntry {
            src: d.src.clone(),
            dst: d.dst.clone(),
            spec: d.spec.name.clone(),
            tool: d.spec.tool(),
            duration_ms: d.spec.duration_ms(),
            first_start: 0,
            repeat_interval_ms: d.spec.repeat_interval_ms(),
        })
        .collect();

    // Latency and trace: spread pairs evenly over each spec's interval.
    let mut by_spec: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, e) in entries.iter().enumerate() {
        if e.tool != Tool::Throughput {
            by_spec
                .entry(demands[i].spec.name.as_str())
                .or_default()
                .push(i);
        }
    }
    for idxs in by_spec.values() {
        let step = entries[idxs[0]].repeat_interval_ms / idxs.len() as u64;
        for (k, &i) in idxs.iter().enumerate() {
            entries[i].first_start = k as u64 * step;
        }
    }

    let mut tput: Vec<usize> = (0..entries.len())
        .filter(|&i| entries[i].tool == Tool::Throughput)
        .collect();
    if tput.is_empty() {
        return Ok(entries);
    }
    tput.sort_by(|&a, &b| {
        let (x, y) = (&entries[a], &entries[b]);
        (&x.src, &x.dst, &x.spec).cmp(&(&y.src, &y.dst, &y.spec))
    });
    let period = tput
        .iter()
        .map(|&i| entries[i].repeat_interval_ms)
        .fold(1u64, |acc, r| acc.lcm(&r));

    // Necessary condition: per-host busy time within one hyperperiod.
    let mut load: BTreeMap<&HostId, u128> = BTreeMap::new();
    for &i in &tput {
        let e = &entries[i];
        let busy = u128::from(e.duration_ms) * u128::from(period / e.repeat_interval_ms);
        for h in [&e.src, &e.dst] {
            *load.entry(h).or_default() += busy;
        }
    }
    if let Some((h, busy)) = load.iter().find(|(_, &b)| b > u128::from(period)) {
        return Err(MeshConfigError::Infeasible {
            host: (*h).clone(),
            reason: format!("needs {busy} ms of throughput testing per {period} ms"),
        });
    }

    let mut timelines: HashMap<HostId, Timeline> = HashMap::new();
    for &i in &tput {
        let (src, dst, len, repeat) = {
            let e = &entries[i];
            (
                e.src.clone(),
                e.dst.clone(),
                e.duration_ms,
                e.repeat_interval_ms,
            )
        };
        let mut candidates = vec![0u64];
        for h in [&src, &dst] {
            if let Some(tl) = timelines.get(h) {
                candidates.extend(tl.busy.iter().map(|&(_, end)| end % repeat));
            }
        }
        candidates.sort_unstable();
        candidates.dedup();
        let copies = period / repeat;
        let fits = |o: SimTime, timelines: &HashMap<HostId, Timeline>| {
            (0..copies).all(|k| {
                [&src, &dst].iter().all(|h| {
                    timelines
                        .get(*h)
                        .is_none_or(|tl| !tl.overlaps(o + k * repeat, len, period))
                })
            })
        };
        let Some(offset) = candidates.into_iter().find(|&o| fits(o, &timelines)) else {
            return Err(MeshConfigError::Infeasible {
                host: src,
                reason: format!("no free {len} ms slot for throughput test to {dst}"),
            });
        };
        for h in [&src, &dst] {
            let tl = timelines.entry(h.clone()).or_default();
            for k in 0..copies {
                tl.add(offset + k * repeat, len, period);
            }
        }
        entries[i].first_start = offset;
    }
    Ok(entries)
}

/// Hyperperiod of the throughput entries of a schedule (1 when there are none).
pub fn throughput_hyperperiod(schedule: &[ScheduleEntry]) -> SimTime {
    schedule
        .iter()
        .filter(|e| e.tool == Tool::Throughput)
        .fold(1u64, |acc, e| acc.lcm(&e.repeat_interval_ms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::TestKind;

    const CONFIG: &str = r#"
[[host]]
id = "a"
node = "A"
site = "CERN"
segment = "LHCOPN"
latitude = 46.2
longitude = 6.1

[[host]]
id = "b"
node = "B"

[[host]]
id = "c"
node = "C"

[[spec]]
name = "owamp"
tool = "latency"
packet_count = 600
packet_interval_ms = 50
payload_size = 100
repeat_interval_s = 60

[[spec]]
name = "iperf"
tool = "throughput"
duration_s = 30
payload_size = 1500
repeat_interval_s = 3600

[[mesh]]
name = "wlcg"
members = ["a", "b", "c"]
specs = ["owamp", "iperf"]
"#;

    fn h(s: &str) -> HostId {
        HostId::new(s)
    }

    #[test]
    fn parse_valid_config() {
        let cfg = MeshConfig::parse(CONFIG).unwrap();
        assert_eq!(cfg.hosts.len(), 3);
        assert_eq!(cfg.hosts[0].segment, "LHCOPN");
        assert_eq!(cfg.hosts[1].segment, "other");
        assert_eq!(cfg.meshes[0].topology, MeshTopology::FullMesh);
        assert_eq!(
            cfg.specs["iperf"].kind,
            TestKind::Throughput {
                duration_s: 30,
                payload_size: 1500
            }
        );
    }

    #[test]
    fn unknown_host_named() {
        let doc = CONFIG.replace(r#"members = ["a", "b", "c"]"#, r#"members = ["a", "X"]"#);
        match MeshConfig::parse(&doc) {
            Err(MeshConfigError::UnknownHost { host, .. }) => assert_eq!(host, "X"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_host_rejected() {
        let doc = CONFIG.replace("id = \"c\"", "id = \"b\"");
        assert!(matches!(
            MeshConfig::parse(&doc),
            Err(MeshConfigError::DuplicateHost(_))
        ));
    }

    #[test]
    fn unknown_spec_rejected() {
        let doc = CONFIG.replace(r#"specs = ["owamp", "iperf"]"#, r#"specs = ["nope"]"#);
        assert!(matches!(
            MeshConfig::parse(&doc),
            Err(MeshConfigError::UnknownSpec { .. })
        ));
    }

    fn mesh(members: &[&str], topology: MeshTopology) -> MeshDefinition {
        MeshDefinition {
            name: "m".into(),
            members: members.iter().map(|s| h(s)).collect(),
            specs: vec![],
            topology,
        }
    }

    #[test]
    fn expand_full_and_disjoint() {
        assert_eq!(
            expand_mesh(&mesh(&["a", "b", "c"], MeshTopology::FullMesh)).len(),
            6
        );
        assert_eq!(
            expand_mesh(&mesh(&["a", "b"], MeshTopology::FullMesh)),
            vec![(h("a"), h("b")), (h("b"), h("a"))]
        );
        assert_eq!(
            expand_mesh(&mesh(
                &["a", "b"],
                MeshTopology::Disjoint(vec![(h("a"), h("b"))])
            )),
            vec![(h("a"), h("b"))]
        );
    }

    fn tput_spec(duration_s: u64, repeat_s: u64) -> TestSpec {
        TestSpec {
            name: format!("t{duration_s}-{repeat_s}"),
            kind: TestKind::Throughput {
                duration_s,
                payload_size: 1500,
            },
            repeat_interval_s: repeat_s,
            version: 1,
        }
    }

    #[test]
    fn single_pair_starts_at_zero() {
        let spec = tput_spec(30, 3600);
        let s = build_schedule(&[Demand {
            src: h("a"),
            dst: h("b"),
            spec: &spec,
        }])
        .unwrap();
        assert_eq!(s[0].first_start, 0);
    }

    #[test]
    fn latency_phase_offsets() {
        let cfg = MeshConfig::parse(CONFIG).unwrap();
        let s = cfg.schedule().unwrap();
        let lat: Vec<_> = s
            .iter()
            .filter(|e| e.tool == Tool::Latency)
            .map(|e| e.first_start)
            .collect();
        assert_eq!(lat, vec![0, 10_000, 20_000, 30_000, 40_000, 50_000]);
    }

    #[test]
    fn throughput_staggered_in_three_mesh() {
        let cfg = MeshConfig::parse(CONFIG).unwrap();
        let s = cfg.schedule().unwrap();
        let t: Vec<_> = s.iter().filter(|e| e.tool == Tool::Throughput).collect();
        assert_eq!(t.len(), 6);
        // With three hosts, every two pairs share a host, so all six need distinct slots.
        let mut starts: Vec<_> = t.iter().map(|e| e.first_start).collect();
        starts.sort_unstable();
        assert_eq!(starts, vec![0, 30_000, 60_000, 90_000, 120_000, 150_000]);
    }

    #[test]
    fn infeasible_when_overloaded() {
        let spec = tput_spec(30, 60);
        let demands: Vec<_> = [("a", "b"), ("a", "c"), ("b", "a")]
            .iter()
            .map(|(s, d)| Demand {
                src: h(s),
                dst: h(d),
                spec: &spec,
            })
            .collect();
        assert!(matches!(
            build_schedule(&demands),
            Err(MeshConfigError::Infeasible { .. })
        ));
    }

    #[test]
    fn next_due_windows() {
        let e = ScheduleEntry {
            src: h("a"),
            dst: h("b"),
            spec: "x".into(),
            tool: Tool::Latency,
            duration_ms: 1,
            first_start: 0,
            repeat_interval_ms: 60,
        };
        let sched = vec![e];
        let d = next_due(&sched, 0, 60);
        assert_eq!(d.iter().map(|d| d.at).collect::<Vec<_>>(), vec![0]);
        let d = next_due(&sched, 59, 2);
        assert_eq!(d.iter().map(|d| d.at).collect::<Vec<_>>(), vec![60]);
        assert!(next_due(&[], 0, 100).is_empty());
        assert_eq!(next_due(&sched, 1, 180).len(), 3);
    }
}
