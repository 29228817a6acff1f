use serde::Deserialize;

use crate::ids::{SimTime, MS_PER_SEC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tool {
    Latency,
    Throughput,
    Trace,
}

impl Tool {
    pub fn as_str(self) -> &'static str {
        match self {
            Tool::Latency => "latency",
            Tool::Throughput => "throughput",
            Tool::Trace => "trace",
        }
    }
}

/// Tool-specific test parameters. Each tool carries exactly its own fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TestKind {
    Latency {
        packet_count: u32,
        packet_interval_ms: u64,
        payload_size: u32,
    },
    Throughput {
        duration_s: u64,
        payload_size: u32,
    },
    Trace {
        max_ttl: u32,
    },
}

/// A named, versioned test specification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestSpec {
    pub name: String,
    pub kind: TestKind,
    pub repeat_interval_s: u64,
    pub version: u32,
}

impl TestSpec {
    pub fn tool(&self) -> Tool {
        match self.kind {
            TestKind::Latency { .. } => Tool::Latency,
            TestKind::Throughput { .. } => Tool::Throughput,
            TestKind::Trace { .. } => Tool::Trace,
        }
    }

    /// How long one occurrence keeps the test running, in simulated ms.
    ///
    /// Latency streams last `packet_count * packet_interval`; throughput tests
    /// their configured duration; traces are treated as instantaneous.
    pub fn duration_ms(&self) -> SimTime {
        match self.kind {
            TestKind::Latency {
                packet_count,
                packet_interval_ms,
                ..
            } => u64::from(packet_count) * packet_interval_ms,
            TestKind::Throughput { duration_s, .. } => duration_s * MS_PER_SEC,
            TestKind::Trace { .. } => 0,
        }
    }

    pub fn repeat_interval_ms(&self) -> SimTime {
        self.repeat_interval_s * MS_PER_SEC
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.kind {
            TestKind::Latency {
                packet_count,
                payload_size,
                ..
            } => {
                if packet_count == 0 {
                    return Err("packet_count must be > 0".into());
                }
                if payload_size == 0 {
                    return Err("payload_size must be > 0".into());
                }
            }
            TestKind::Throughput {
                duration_s,
                payload_size,
            } => {
                if duration_s == 0 {
                    return Err("duration_s must be > 0".into());
                }
                if payload_size == 0 {
                    return Err("payload_size must be > 0".into());
                }
            }
            TestKind::Trace { max_ttl } => {
                if max_ttl == 0 {
                    return Err("max_ttl must be >= 1".into());
                }
            }
        }
        if self.repeat_interval_ms() <= self.duration_ms() {
            return Err(format!(
                "repeat_interval_s {} must exceed the test duration ({} ms)",
                self.repeat_interval_s,
                self.duration_ms()
            ));
        }
        Ok(())
    }
}

/// The flat document form of a test spec; [`TestSpecDoc::into_spec`] enforces
/// that exactly the tool's own fields are present.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSpecDoc {
    pub name: String,
    pub tool: String,
    pub repeat_interval_s: u64,
    #[serde(default = "default_version")]
    pub version: u32,
    pub packet_count: Option<u32>,
    pub packet_interval_ms: Option<u64>,
    pub payload_size: Option<u32>,
    pub duration_s: Option<u64>,
    pub max_ttl: Option<u32>,
}

fn default_version() -> u32 {
    1
}

impl TestSpecDoc {
    pub fn into_spec(self) -> Result<TestSpec, String> {
        let present = [
            ("packet_count", self.packet_count.is_some()),
            ("packet_interval_ms", self.packet_interval_ms.is_some()),
            ("payload_size", self.payload_size.is_some()),
            ("duration_s", self.duration_s.is_some()),
            ("max_ttl", self.max_ttl.is_some()),
        ];
        let allowed: &[&str] = match self.tool.as_str() {
            "latency" => &["packet_count", "packet_interval_ms", "payload_size"],
            "throughput" => &["duration_s", "payload_size"],
            "trace" => &["max_ttl"],
            other => return Err(format!("unknown tool {other:?}")),
        };
        for (field, is_set) in present {
            let wanted = allowed.contains(&field);
            if is_set && !wanted {
                return Err(format!(
                    "field {field} does not apply to tool {}",
                    self.tool
                ));
            }
            if !is_set && wanted {
                return Err(format!("tool {} requires field {field}", self.tool));
            }
        }
        let kind = match self.tool.as_str() {
            "latency" => TestKind::Latency {
                packet_count: self.packet_count.unwrap(),
                packet_interval_ms: self.packet_interval_ms.unwrap(),
                payload_size: self.payload_size.unwrap(),
            },
            "throughput" => TestKind::Throughput {
                duration_s: self.duration_s.unwrap(),
                payload_size: self.payload_size.unwrap(),
            },
            _ => TestKind::Trace {
                max_ttl: self.max_ttl.unwrap(),
            },
        };
        let spec = TestSpec {
            name: self.name,
            kind,
            repeat_interval_s: self.repeat_interval_s,
            version: self.version,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(s: &str) -> Result<TestSpec, String> {
        toml::from_str::<TestSpecDoc>(s)
            .map_err(|e| e.to_string())?
            .into_spec()
    }

    #[test]
    fn latency_spec() {
        let s = doc("name='l'\ntool='latency'\nrepeat_interval_s=60\npacket_count=600\npacket_interval_ms=50\npayload_size=100").unwrap();
        assert_eq!(s.tool(), Tool::Latency);
        assert_eq!(s.duration_ms(), 30_000);
        assert_eq!(s.version, 1);
    }

    #[test]
    fn foreign_field_rejected() {
        let e = doc("name='l'\ntool='latency'\nrepeat_interval_s=60\npacket_count=6\npacket_interval_ms=5\npayload_size=100\nduration_s=3").unwrap_err();
        assert!(e.contains("duration_s"), "{e}");
    }

    #[test]
    fn missing_field_rejected() {
        let e = doc("name='t'\ntool='throughput'\nrepeat_interval_s=60\nduration_s=3").unwrap_err();
        assert!(e.contains("payload_size"), "{e}");
    }

    #[test]
    fn repeat_must_exceed_duration() {
        assert!(doc(
            "name='t'\ntool='throughput'\nrepeat_interval_s=30\nduration_s=30\npayload_size=1500"
        )
        .is_err());
        assert!(doc(
            "name='t'\ntool='throughput'\nrepeat_interval_s=31\nduration_s=30\npayload_size=1500"
        )
        .is_ok());
    }

    #[test]
    fn zero_duration_rejected() {
        assert!(doc(
            "name='t'\ntool='throughput'\nrepeat_interval_s=30\nduration_s=0\npayload_size=1500"
        )
        .is_err());
    }
}
