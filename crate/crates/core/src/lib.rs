//! Mesh network measurement on a simulated network.
//!
//! Agents run latency, throughput and path tests over [`netsim`] topologies,
//! a [`collector`] polls them and fans envelopes out over a bus to tiered
//! [`store`]s and the [`analytics`] engine. [`scenario`] wires everything
//! together for end-to-end runs; [`jobsingest`] handles job-transfer logs.

pub mod agent;
pub mod analytics;
pub mod collector;
pub mod envelope;
pub mod ids;
pub mod jobsingest;
pub mod measurement;
pub mod meshconfig;
pub mod netsim;
pub mod scenario;
pub mod stats;
pub mod store;

pub use analytics::{Alert, AlertKind, Baseline, Severity, Subject, Thresholds};
pub use envelope::{MeasurementEnvelope, RecordId};
pub use ids::{HostId, NodeId, SimTime};
pub use measurement::{Measurement, MetricKind};
