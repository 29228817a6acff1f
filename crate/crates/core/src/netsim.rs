//! Seeded, multi-hop simulated network.
//!
//! A [`Topology`] holds directed links and configured routes. Route changes and
//! link edits are stored as time-stamped epochs, so one immutable value answers
//! queries for any simulated instant. Probes traverse the route link by link:
//! each link first enforces its MTU (for don't-fragment probes), then drops the
//! probe with its loss probability, then adds `base_latency + U[0, jitter_max)`.
//!
//! The topology document is TOML:
//!
//! ```toml
//! seed = 42
//! nodes = ["A", "B", "C"]
//!
//! [[link]]
//! from = "A"
//! to = "B"
//! latency_ms = 5.0
//! jitter_ms = 0.5
//! loss = 0.0
//! bandwidth_mbps = 1000.0
//! mtu = 9000
//! bidirectional = true      # optional, also adds B -> A with the same parameters
//!
//! [[route]]
//! path = ["A", "B", "C"]
//! symmetric = true          # optional, also installs C -> B -> A
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::{NodeId, SimTime};

pub const MIN_MTU: u32 = 576;
/// Largest IPv4 datagram; also the first size a path-MTU search tries.
pub const MAX_MTU: u32 = 65_535;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetsimError {
    #[error("topology parse error: {0}")]
    Parse(String),
    #[error("invalid {entity}: {reason}")]
    Validation { entity: String, reason: String },
    #[error("no route from {src} to {dst}")]
    NoRoute { src: NodeId, dst: NodeId },
    #[error("unknown link {from} -> {to}")]
    UnknownLink { from: NodeId, to: NodeId },
    #[error("invalid probe: {0}")]
    InvalidProbe(String),
}

fn invalid(entity: impl Into<String>, reason: impl Into<String>) -> NetsimError {
    NetsimError::Validation {
        entity: entity.into(),
        reason: reason.into(),
    }
}

/// Parameters of one directed link.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub from: NodeId,
    pub to: NodeId,
    pub base_latency_ms: f64,
    pub jitter_max_ms: f64,
    pub loss_prob: f64,
    pub bandwidth_mbps: f64,
    pub mtu: u32,
}

impl LinkSpec {
    fn validate(&self) -> Result<(), NetsimError> {
        let name = || format!("link {} -> {}", self.from, self.to);
        if self.from == self.to {
            return Err(invalid(name(), "self loop"));
        }
        if !(self.base_latency_ms.is_finite() && self.base_latency_ms >= 0.0) {
            return Err(invalid(name(), "latency must be a finite value >= 0"));
        }
        if !(self.jitter_max_ms.is_finite() && self.jitter_max_ms >= 0.0) {
            return Err(invalid(name(), "jitter must be a finite value >= 0"));
        }
        check_loss(&name(), self.loss_prob)?;
        check_bandwidth(&name(), self.bandwidth_mbps)?;
        if !(MIN_MTU..=MAX_MTU).contains(&self.mtu) {
            return Err(invalid(
                name(),
                format!("mtu {} outside [{MIN_MTU}, {MAX_MTU}]", self.mtu),
            ));
        }
        Ok(())
    }
}

fn check_loss(entity: &str, loss: f64) -> Result<(), NetsimError> {
    if (0.0..=1.0).contains(&loss) {
        Ok(())
    } else {
        Err(invalid(entity, format!("loss {loss} outside [0, 1]")))
    }
}

fn check_bandwidth(entity: &str, bw: f64) -> Result<(), NetsimError> {
    if bw.is_finite() && bw > 0.0 {
        Ok(())
    } else {
        Err(invalid(entity, format!("bandwidth {bw} must be > 0")))
    }
}

/// Values that change over simulated time, keyed by the instant they take effect.
#[derive(Debug, Clone, PartialEq)]
struct Timeline<T> {
    epochs: Vec<(SimTime, T)>,
}

impl<T: Clone> Timeline<T> {
    fn new(initial: T) -> Self {
        Self {
            epochs: vec![(0, initial)],
        }
    }

    fn at(&self, t: SimTime) -> &T {
        let idx = self.epochs.partition_point(|(start, _)| *start <= t);
        &self.epochs[idx.saturating_sub(1)].1
    }

    fn set_from(&mut self, t: SimTime, value: T) {
        match self.epochs.binary_search_by_key(&t, |(s, _)| *s) {
            Ok(i) => self.epochs[i].1 = value,
            Err(i) => self.epochs.insert(i, (t, value)),
        }
    }

    fn len(&self) -> usize {
        self.epochs.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LinkState {
    spec: LinkSpec,
    loss: Timeline<f64>,
    bandwidth: Timeline<f64>,
}

/// The simulated network. Immutable; edits return a new value.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    nodes: BTreeSet<NodeId>,
    links: BTreeMap<(NodeId, NodeId), LinkState>,
    routes: BTreeMap<(NodeId, NodeId), Timeline<Vec<NodeId>>>,
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyDoc {
    seed: u64,
    nodes: Vec<String>,
    #[serde(default, rename = "link")]
    links: Vec<LinkDoc>,
    #[serde(default, rename = "route")]
    routes: Vec<RouteDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkDoc {
    from: String,
    to: String,
    latency_ms: f64,
    #[serde(default)]
    jitter_ms: f64,
    #[serde(default)]
    loss: f64,
    bandwidth_mbps: f64,
    mtu: u32,
    #[serde(default)]
    bidirectional: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RouteDoc {
    path: Vec<String>,
    #[serde(default)]
    symmetric: bool,
}

impl Topology {
    /// Parses and validates a topology document.
    pub fn parse(text: &str) -> Result<Self, NetsimError> {
        let doc: TopologyDoc =
            toml::from_str(text).map_err(|e| NetsimError::Parse(e.to_string()))?;
        let mut links = Vec::new();
        for l in doc.links {
            let spec = LinkSpec {
                from: NodeId::new(&l.from),
                to: NodeId::new(&l.to),
                base_latency_ms: l.latency_ms,
                jitter_max_ms: l.jitter_ms,
                loss_prob: l.loss,
                bandwidth_mbps: l.bandwidth_mbps,
                mtu: l.mtu,
            };
            if l.bidirectional {
                links.push(LinkSpec {
                    from: spec.to.clone(),
                    to: spec.from.clone(),
                    ..spec.clone()
                });
            }
            links.push(spec);
        }
        let mut routes = Vec::new();
        for r in doc.routes {
            let path: Vec<NodeId> = r.path.iter().map(NodeId::new).collect();
            if r.symmetric {
                routes.push(path.iter().rev().cloned().collect());
            }
            routes.push(path);
        }
        Self::new(
            doc.nodes.into_iter().map(NodeId::from),
            links,
            routes,
            doc.seed,
        )
    }

    /// Builds a topology from parts. Each route is keyed by its first and last node.
    pub fn new(
        nodes: impl IntoIterator<Item = NodeId>,
        links: impl IntoIterator<Item = LinkSpec>,
        routes: impl IntoIterator<Item = Vec<NodeId>>,
        seed: u64,
    ) -> Result<Self, NetsimError> {
        let mut node_set = BTreeSet::new();
        for n in nodes {
            if !n.is_valid() {
                return Err(invalid(
                    format!("node {n:?}"),
                    "identifier contains invalid characters",
                ));
            }
            if !node_set.insert(n.clone()) {
                return Err(invalid(format!("node {n}"), "declared twice"));
            }
        }
        if node_set.is_empty() {
            return Err(invalid("topology", "node set is empty"));
        }
        let mut topo = Topology {
            nodes: node_set,
            links: BTreeMap::new(),
            routes: BTreeMap::new(),
            seed,
        };
        for l in links {
            l.validate()?;
            for n in [&l.from, &l.to] {
                if !topo.nodes.contains(n) {
                    return Err(invalid(
                        format!("link {} -> {}", l.from, l.to),
                        format!("unknown node {n}"),
                    ));
                }
            }
            let key = (l.from.clone(), l.to.clone());
            if topo.links.contains_key(&key) {
                return Err(invalid(
                    format!("link {} -> {}", l.from, l.to),
                    "declared twice",
                ));
            }
            topo.links.insert(
                key,
                LinkState {
                    loss: Timeline::new(l.loss_prob),
                    bandwidth: Timeline::new(l.bandwidth_mbps),
                    spec: l,
                },
            );
        }
        for r in routes {
            topo.validate_route(&r)?;
            let key = (r[0].clone(), r[r.len() - 1].clone());
            if topo.routes.contains_key(&key) {
                return Err(invalid(route_name(&key.0, &key.1), "declared twice"));
            }
            topo.routes.insert(key, Timeline::new(r));
        }
        Ok(topo)
    }

    fn validate_route(&self, route: &[NodeId]) -> Result<(), NetsimError> {
        if route.len() < 2 {
            return Err(invalid(
                "route",
                format!("{route:?} needs at least two nodes"),
            ));
        }
        let name = route_name(&route[0], &route[route.len() - 1]);
        let mut seen = HashSet::new();
        for n in route {
            if !self.nodes.contains(n) {
                return Err(invalid(name, format!("unknown node {n}")));
            }
            if !seen.insert(n) {
                return Err(invalid(name, format!("node {n} repeated")));
            }
        }
        for w in route.windows(2) {
            if !self.links.contains_key(&(w[0].clone(), w[1].clone())) {
                return Err(invalid(name, format!("missing link {} -> {}", w[0], w[1])));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.iter()
    }

    pub fn contains_node(&self, n: &NodeId) -> bool {
        self.nodes.contains(n)
    }

    /// Link parameters as configured at time zero.
    pub fn links(&self) -> impl Iterator<Item = &LinkSpec> {
        self.links.values().map(|s| &s.spec)
    }

    /// Effective link parameters at `t`, with loss and bandwidth edits applied.
    pub fn link_at(&self, from: &NodeId, to: &NodeId, t: SimTime) -> Result<LinkSpec, NetsimError> {
        let state = self.link_state(from, to)?;
        Ok(LinkSpec {
            loss_prob: *state.loss.at(t),
            bandwidth_mbps: *state.bandwidth.at(t),
            ..state.spec.clone()
        })
    }

    fn link_state(&self, from: &NodeId, to: &NodeId) -> Result<&LinkState, NetsimError> {
        self.links
            .get(&(from.clone(), to.clone()))
            .ok_or_else(|| NetsimError::UnknownLink {
                from: from.clone(),
                to: to.clone(),
            })
    }

    /// Pairs with a configured route.
    pub fn route_pairs(&self) -> impl Iterator<Item = &(NodeId, NodeId)> {
        self.routes.keys()
    }

    /// The route in effect for `(src, dst)` at time `t`.
    pub fn route_lookup(
        &self,
        src: &NodeId,
        dst: &NodeId,
        t: SimTime,
    ) -> Result<&[NodeId], NetsimError> {
        self.routes
            .get(&(src.clone(), dst.clone()))
            .map(|tl| tl.at(t).as_slice())
            .ok_or_else(|| NetsimError::NoRoute {
                src: src.clone(),
                dst: dst.clone(),
            })
    }

    /// Number of distinct route epochs configured for a pair.
    pub fn route_epochs(&self, src: &NodeId, dst: &NodeId) -> usize {
        self.routes
            .get(&(src.clone(), dst.clone()))
            .map_or(0, Timeline::len)
    }

    /// Installs `new_route` for its endpoints from `at` onward.
    pub fn with_route_change(
        &self,
        new_route: Vec<NodeId>,
        at: SimTime,
    ) -> Result<Self, NetsimError> {
        self.validate_route(&new_route)?;
        let key = (new_route[0].clone(), new_route[new_route.len() - 1].clone());
        let mut next = self.clone();
        match next.routes.get_mut(&key) {
            Some(tl) => tl.set_from(at, new_route),
            None => {
                // A pair without a route before `at` has no epoch 0; model that by
                // refusing, since lookups before `at` would otherwise be undefined.
                return Err(NetsimError::NoRoute {
                    src: key.0,
                    dst: key.1,
                });
            }
        }
        Ok(next)
    }

    /// Sets the loss probability of a link from `at` onward.
    pub fn with_link_loss(
        &self,
        from: &NodeId,
        to: &NodeId,
        loss: f64,
        at: SimTime,
    ) -> Result<Self, NetsimError> {
        check_loss(&format!("link {from} -> {to}"), loss)?;
        self.link_state(from, to)?;
        let mut next = self.clone();
        let st = next
            .links
            .get_mut(&(from.clone(), to.clone()))
            .expect("checked above");
        st.loss.set_from(at, loss);
        Ok(next)
    }

    /// Sets the bandwidth of a link from `at` onward.
    pub fn with_link_bandwidth(
        &self,
        from: &NodeId,
        to: &NodeId,
        mbps: f64,
        at: SimTime,
    ) -> Result<Self, NetsimError> {
        check_bandwidth(&format!("link {from} -> {to}"), mbps)?;
        self.link_state(from, to)?;
        let mut next = self.clone();
        let st = next
            .links
            .get_mut(&(from.clone(), to.clone()))
            .expect("checked above");
        st.bandwidth.set_from(at, mbps);
        Ok(next)
    }

    /// Resolves the route and per-link parameters in effect at `t`.
    pub fn resolve_path(
        &self,
        src: &NodeId,
        dst: &NodeId,
        t: SimTime,
    ) -> Result<ResolvedPath, NetsimError> {
        let nodes = self.route_lookup(src, dst, t)?.to_vec();
        let links = nodes
            .windows(2)
            .map(|w| self.link_at(&w[0], &w[1], t))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ResolvedPath { nodes, links })
    }

    /// Sends a single probe along the route in effect at `t`.
    pub fn send_probe<R: Rng + ?Sized>(
        &self,
        src: &NodeId,
        dst: &NodeId,
        probe: Probe,
        t: SimTime,
        rng: &mut R,
    ) -> Result<ProbeOutcome, NetsimError> {
        probe.check()?;
        Ok(self.resolve_path(src, dst, t)?.transmit(probe, rng))
    }

    /// A deterministic generator for one named stream of randomness.
    ///
    /// The stream is derived from the topology seed and `stream`, so every
    /// test occurrence can own an independent, reproducible generator.
    pub fn rng_for(&self, stream: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_be_bytes());
        h.update(stream.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}

fn route_name(src: &NodeId, dst: &NodeId) -> String {
    format!("route ({src}, {dst})")
}

/// Probe parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub size: u32,
    pub ttl: u32,
    pub dont_fragment: bool,
}

impl Probe {
    pub const DEFAULT_TTL: u32 = 64;

    pub fn new(size: u32) -> Self {
        Self {
            size,
            ttl: Self::DEFAULT_TTL,
            dont_fragment: false,
        }
    }

    pub fn ttl(self, ttl: u32) -> Self {
        Self { ttl, ..self }
    }

    pub fn dont_fragment(self) -> Self {
        Self {
            dont_fragment: true,
            ..self
        }
    }

    fn check(&self) -> Result<(), NetsimError> {
        if self.size == 0 {
            return Err(NetsimError::InvalidProbe("size must be > 0".into()));
        }
        if self.ttl == 0 {
            return Err(NetsimError::InvalidProbe("ttl must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropReason {
    RandomLoss,
    MtuExceeded,
    TtlExpired,
}

/// Result of one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub delivered: bool,
    /// Present iff delivered.
    pub one_way_delay_ms: Option<f64>,
    /// Delay accumulated up to the node where the probe stopped.
    pub elapsed_ms: f64,
    /// Links fully traversed.
    pub hop_count: usize,
    pub drop_reason: Option<DropReason>,
    /// Destination when delivered, otherwise the node where the probe stopped
    /// (the expiring node for TTL expiry).
    pub stopped_at: NodeId,
    pub fragmentation_needed_at: Option<NodeId>,
    /// MTU of the link that refused a don't-fragment probe, as reported in
    /// the "fragmentation needed" reply.
    pub next_hop_mtu: Option<u32>,
}

/// A route with the link parameters in effect at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPath {
    pub nodes: Vec<NodeId>,
    pub links: Vec<LinkSpec>,
}

impl ResolvedPath {
    pub fn min_mtu(&self) -> u32 {
        self.links.iter().map(|l| l.mtu).min().unwrap_or(u32::MAX)
    }

    pub fn bottleneck_mbps(&self) -> f64 {
        self.links
            .iter()
            .map(|l| l.bandwidth_mbps)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn delivery_probability(&self) -> f64 {
        self.links.iter().map(|l| 1.0 - l.loss_prob).product()
    }

    pub fn min_delay_ms(&self) -> f64 {
        self.links.iter().map(|l| l.base_latency_ms).sum()
    }

    pub fn max_delay_ms(&self) -> f64 {
        self.links
            .iter()
            .map(|l| l.base_latency_ms + l.jitter_max_ms)
            .sum()
    }

    /// Walks the probe across the links, drawing loss then jitter per link.
    pub fn transmit<R: Rng + ?Sized>(&self, probe: Probe, rng: &mut R) -> ProbeOutcome {
        let mut elapsed = 0.0;
        let stop = |i: usize, elapsed: f64, reason: DropReason| ProbeOutcome {
            next_hop_mtu: (reason == DropReason::MtuExceeded).then(|| self.links[i].mtu),
            delivered: false,
            one_way_delay_ms: None,
            elapsed_ms: elapsed,
            hop_count: i,
            drop_reason: Some(reason),
            stopped_at: self.nodes[i].clone(),
            fragmentation_needed_at: (reason == DropReason::MtuExceeded)
                .then(|| self.nodes[i].clone()),
        };
        for (i, link) in self.links.iter().enumerate() {
            if probe.dont_fragment && probe.size > link.mtu {
                return stop(i, elapsed, DropReason::MtuExceeded);
            }
            if rng.random::<f64>() < link.loss_prob {
                return stop(i, elapsed, DropReason::RandomLoss);
            }
            let u: f64 = rng.random();
            elapsed += link.base_latency_ms + u * link.jitter_max_ms;
            let traversed = i + 1;
            if traversed as u64 == u64::from(probe.ttl) && traversed < self.links.len() {
                return stop(traversed, elapsed, DropReason::TtlExpired);
            }
        }
        ProbeOutcome {
            delivered: true,
            one_way_delay_ms: Some(elapsed),
            elapsed_ms: elapsed,
            hop_count: self.links.len(),
            drop_reason: None,
            stopped_at: self.nodes[self.nodes.len() - 1].clone(),
            fragmentation_needed_at: None,
            next_hop_mtu: None,
        }
    }
}
