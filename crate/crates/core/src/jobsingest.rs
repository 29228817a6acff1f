//! Job-transfer TCP statistics: log parsing, geo enrichment, aggregation.
//!
//! A log line is a space-separated list of `key=value` fields:
//!
//! ```text
//! ts=2020-01-15T12:00:00Z submit=s1.example.org worker=10.2.3.4 bytes=123456789 lost_pkts=12 reorders=3 duration_s=42.5
//! ```
//!
//! All seven keys are required and may appear in any order. Unknown keys are
//! skipped and counted. `ts` is UTC with whole seconds. The geo table is a
//! text file of `prefix,region,lat,lon` lines; blank lines and lines starting
//! with `#` are ignored.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::BufRead;
use std::net::IpAddr;

use chrono::{DateTime, NaiveDateTime, Utc};
use ipnet::IpNet;
use thiserror::Error;

pub const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";
pub const UNLOCATED: &str = "unlocated";

const KEYS: [&str; 7] = [
    "ts",
    "submit",
    "worker",
    "bytes",
    "lost_pkts",
    "reorders",
    "duration_s",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GeoInfo {
    pub region: String,
    pub latitude: f64,
    pub longitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobTransferRecord {
    pub timestamp: DateTime<Utc>,
    pub submit_host: String,
    pub worker_addr: IpAddr,
    pub bytes: u64,
    pub lost_pkts: u64,
    pub reorders: u64,
    pub duration_s: f64,
    pub geo: Option<GeoInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub reason: String,
}

/// A parsed record plus the number of unknown keys it carried.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLine {
    pub record: JobTransferRecord,
    pub unknown_keys: usize,
}

fn parse_count(key: &str, v: &str) -> Result<u64, String> {
    if v.starts_with('-') {
        return Err(format!("{key} must be non-negative, got {v}"));
    }
    v.parse()
        .map_err(|_| format!("{key} is not an integer: {v:?}"))
}

/// Parses one log line; `line_no` is used in errors.
pub fn parse_line(text: &str, line_no: usize) -> Result<ParsedLine, ParseError> {
    let err = |reason: String| ParseError {
        line: line_no,
        reason,
    };
    let mut fields: HashMap<&str, &str> = HashMap::new();
    let mut unknown_keys = 0;
    for tok in text.split_ascii_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| err(format!("field {tok:?} is not key=value")))?;
        if !KEYS.contains(&k) {
            unknown_keys += 1;
            continue;
        }
        if fields.insert(k, v).is_some() {
            return Err(err(format!("duplicate key {k}")));
        }
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| err(format!("missing required key {k}")))
    };

    let ts = get("ts")?;
    let timestamp = NaiveDateTime::parse_from_str(ts, TS_FORMAT)
        .map_err(|e| err(format!("bad ts {ts:?}: {e}")))?
        .and_utc();
    let submit = get("submit")?;
    if submit.is_empty() {
        return Err(err("submit is empty".into()));
    }
    let worker = get("worker")?;
    let worker_addr = worker
        .parse()
        .map_err(|_| err(format!("worker is not an IP address: {worker:?}")))?;
    let bytes = parse_count("bytes", get("bytes")?).map_err(err)?;
    let lost_pkts = parse_count("lost_pkts", get("lost_pkts")?).map_err(err)?;
    let reorders = parse_count("reorders", get("reorders")?).map_err(err)?;
    let d = get("duration_s")?;
    let duration_s: f64 = d
        .parse()
        .map_err(|_| err(format!("duration_s is not a number: {d:?}")))?;
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(err(format!("duration_s must be > 0, got {d}")));
    }
    Ok(ParsedLine {
        record: JobTransferRecord {
            timestamp,
            submit_host: submit.to_string(),
            worker_addr,
            bytes,
            lost_pkts,
            reorders,
            duration_s,
            geo: None,
        },
        unknown_keys,
    })
}

impl JobTransferRecord {
    /// Canonical log line (geo annotation is not part of the line).
    pub fn to_line(&self) -> String {
        format!(
            "ts={} submit={} worker={} bytes={} lost_pkts={} reorders={} duration_s={}",
            self.timestamp.format(TS_FORMAT),
            self.submit_host,
            self.worker_addr,
            self.bytes,
            self.lost_pkts,
            self.reorders,
            self.duration_s
        )
    }
}

#[derive(Debug, Default)]
pub struct ParsedLog {
    pub records: Vec<JobTransferRecord>,
    pub errors: Vec<ParseError>,
    pub unknown_keys: usize,
}

/// Parses every non-blank line, collecting errors instead of stopping.
pub fn parse_log(reader: impl BufRead) -> std::io::Result<ParsedLog> {
    let mut out = ParsedLog::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, i + 1) {
            Ok(p) => {
                out.unknown_keys += p.unknown_keys;
                out.records.push(p.record);
            }
            Err(e) => out.errors.push(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoEntry {
    pub prefix: IpNet,
    pub region: String,
    pub latitude: f64,
    pub longitude: f64,
}

/// Longest-prefix-match table: one hash map per prefix length, probed from
/// the longest length down.
#[derive(Debug, Default)]
pub struct GeoTable {
    entries: Vec<GeoEntry>,
    levels: Vec<(u8, HashMap<IpNet, usize>)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeoTableError {
    #[error("geo table line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate geo prefix {0}")]
    Duplicate(IpNet),
}

impl GeoTable {
    pub fn new(entries: Vec<GeoEntry>) -> Result<Self, GeoTableError> {
        let mut by_len: BTreeMap<u8, HashMap<IpNet, usize>> = BTreeMap::new();
        let mut entries = entries;
        for (i, e) in entries.iter_mut().enumerate() {
            e.prefix = e.prefix.trunc();
            if by_len
                .entry(e.prefix.prefix_len())
                .or_default()
                .insert(e.prefix, i)
                .is_some()
            {
                return Err(GeoTableError::Duplicate(e.prefix));
            }
        }
        Ok(Self {
            entries,
            levels: by_len.into_iter().rev().collect(),
        })
    }

    pub fn parse(text: &str) -> Result<Self, GeoTableError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| GeoTableError::Parse {
                line: i + 1,
                reason,
            };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let [prefix, region, lat, lon] = f[..] else {
                return Err(bad(format!(
                    "expected 4 comma-separated fields, got {}",
                    f.len()
                )));
            };
            let prefix: IpNet = prefix
                .parse()
                .map_err(|_| bad(format!("bad prefix {prefix:?}")))?;
            if region.is_empty() || region == UNLOCATED {
                return Err(bad(format!("invalid region {region:?}")));
            }
            let coord = |s: &str, max: f64| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.abs() <= max)
                    .ok_or_else(|| bad(format!("bad coordinate {s:?}")))
            };
            entries.push(GeoEntry {
                prefix,
                region: region.to_string(),
                latitude: coord(lat, 90.0)?,
                longitude: coord(lon, 180.0)?,
            });
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[GeoEntry] {
        &self.entries
    }

    pub fn lookup(&self, addr: IpAddr) -> Option<&GeoEntry> {
        let max = match addr {
            IpAddr::V4(_) => 32,
            IpAddr::V6(_) => 128,
        };
        self.levels
            .iter()
            .filter(|(len, _)| *len <= max)
            .find_map(|(len, m)| {
                let key = IpNet::new(addr, *len).ok()?.trunc();
                m.get(&key)
            })
            .map(|&i| &self.entries[i])
    }
}

/// Sets `geo` from the longest matching prefix, or clears it.
pub fn geo_annotate(mut rec: JobTransferRecord, table: &GeoTable) -> JobTransferRecord {
    rec.geo = table.lookup(rec.worker_addr).map(|e| GeoInfo {
        region: e.region.clone(),
        latitude: e.latitude,
        longitude: e.longitude,
    });
    rec
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Region,
    /// Worker address truncated to the given IPv4 prefix length; IPv6 uses
    /// the length plus 24.
    WorkerPrefix(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregateRow {
    pub group: String,
    pub total_bytes: u128,
    pub count: u64,
}

impl fmt::Display for AggregateRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.group, self.total_bytes, self.count)
    }
}

fn group_key(r: &JobTransferRecord, by: GroupBy) -> String {
    match by {
        GroupBy::Region => r
            .geo
            .as_ref()
            .map_or_else(|| UNLOCATED.to_string(), |g| g.region.clone()),
        GroupBy::WorkerPrefix(len) => {
            let len = match r.worker_addr {
                IpAddr::V4(_) => len.min(32),
                IpAddr::V6(_) => len.saturating_add(24).min(128),
            };
            IpNet::new(r.worker_addr, len)
                .expect("prefix length clamped")
                .trunc()
                .to_string()
        }
    }
}

/// Byte totals per group, largest first, ties by group name.
pub fn aggregate_bytes_by_destination<'a>(
    records: impl IntoIterator<Item = &'a JobTransferRecord>,
    by: GroupBy,
) -> Vec<AggregateRow> {
    let mut acc: HashMap<String, (u128, u64)> = HashMap::new();
    for r in records {
        let e = acc.entry(group_key(r, by)).or_default();
        e.0 += u128::from(r.bytes);
        e.1 += 1;
    }
    let mut rows: Vec<AggregateRow> = acc
        .into_iter()
        .map(|(group, (total_bytes, count))| AggregateRow {
            group,
            total_bytes,
            count,
        })
        .collect();
    rows.sort_by(|a, b| {
        b.total_bytes
            .cmp(&a.total_bytes)
            .then_with(|| a.group.cmp(&b.group))
    });
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    const GOLDEN: &str = "ts=2020-01-15T12:00:00Z submit=s1.example.org worker=10.2.3.4 bytes=123456789 lost_pkts=12 reorders=3 duration_s=42.5";

    #[test]
    fn golden_line() {
        let p = parse_line(GOLDEN, 1).unwrap();
        let r = &p.record;
        assert_eq!(r.timestamp.timestamp(), 1_579_089_600);
        assert_eq!(r.submit_host, "s1.example.org");
        assert_eq!(r.worker_addr.to_string(), "10.2.3.4");
        assert_eq!((r.bytes, r.lost_pkts, r.reorders), (123_456_789, 12, 3));
        assert_eq!(r.duration_s, 42.5);
        assert_eq!(p.unknown_keys, 0);
        assert_eq!(r.to_line(), GOLDEN);
    }

    #[test]
    fn errors_name_the_problem() {
        let missing = GOLDEN.replace("bytes=123456789 ", "");
        let e = parse_line(&missing, 7).unwrap_err();
        assert_eq!(e.line, 7);
        assert!(e.reason.contains("bytes"), "{e}");
        let neg = GOLDEN.replace("bytes=123456789", "bytes=-1");
        assert!(parse_line(&neg, 1)
            .unwrap_err()
            .reason
            .contains("non-negative"));
        let dup = format!("{GOLDEN} bytes=1");
        assert!(parse_line(&dup, 1)
            .unwrap_err()
            .reason
            .contains("duplicate"));
        let zero = GOLDEN.replace("duration_s=42.5", "duration_s=0");
        assert!(parse_line(&zero, 1).is_err());
        let extra = format!("{GOLDEN} cluster=x");
        assert_eq!(parse_line(&extra, 1).unwrap().unknown_keys, 1);
    }

    fn table() -> GeoTable {
        GeoTable::parse("# prefix,region,lat,lon\n10.0.0.0/8,US-Central,39.0,-95.0\n10.2.0.0/16,US-Midwest,41.8,-87.6\n")
            .unwrap()
    }

    #[test]
    fn longest_prefix_wins() {
        let t = table();
        assert_eq!(
            t.lookup("10.2.3.4".parse().unwrap()).unwrap().region,
            "US-Midwest"
        );
        assert_eq!(
            t.lookup("10.3.3.4".parse().unwrap()).unwrap().region,
            "US-Central"
        );
        assert!(t.lookup("192.168.0.1".parse().unwrap()).is_none());
        assert!(t.lookup("::1".parse().unwrap()).is_none());
        assert!(matches!(
            GeoTable::parse("10.0.0.0/8,a,0,0\n10.1.0.0/8,b,0,0"),
            Err(GeoTableError::Duplicate(_))
        ));
    }

    #[test]
    fn aggregation() {
        let t = table();
        let base = parse_line(GOLDEN, 1).unwrap().record;
        let recs: Vec<_> = [100u64, 200, 300]
            .into_iter()
            .map(|b| {
                geo_annotate(
                    JobTransferRecord {
                        bytes: b,
                        ..base.clone()
                    },
                    &t,
                )
            })
            .chain([geo_annotate(
                JobTransferRecord {
                    bytes: 1000,
                    worker_addr: "8.8.8.8".parse().unwrap(),
                    ..base.clone()
                },
                &t,
            )])
            .collect();
        let rows = aggregate_bytes_by_destination(&recs, GroupBy::Region);
        assert_eq!(rows[0].to_string(), "unlocated\t1000\t1");
        assert_eq!(rows[1].to_string(), "US-Midwest\t600\t3");
        let rows = aggregate_bytes_by_destination(&recs, GroupBy::WorkerPrefix(24));
        assert_eq!(rows[1].group, "10.2.3.0/24");
        assert!(aggregate_bytes_by_destination(&[], GroupBy::Region).is_empty());
    }

    #[test]
    fn lpm_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for i in 0..300 {
            let len = rng.random_range(0..=32u8);
            let net = IpNet::new(IpAddr::from(rng.random::<[u8; 4]>()), len)
                .unwrap()
                .trunc();
            if seen.insert(net) {
                entries.push(GeoEntry {
                    prefix: net,
                    region: format!("r{i}"),
                    latitude: 0.0,
                    longitude: 0.0,
                });
            }
        }
        let t = GeoTable::new(entries.clone()).unwrap();
        for _ in 0..2000 {
            let addr = IpAddr::from(rng.random::<[u8; 4]>());
            let brute = entries
                .iter()
                .filter(|e| e.prefix.contains(&addr))
                .max_by_key(|e| e.prefix.prefix_len());
            assert_eq!(t.lookup(addr), brute);
        }
    }

    proptest! {
        #[test]
        fn round_trip(
            secs in 0i64..4_000_000_000,
            submit in "[a-z0-9.-]{1,20}",
            ip in any::<[u8; 4]>(),
            bytes in any::<u64>(),
            lost in any::<u64>(),
            reorders in any::<u64>(),
            dur in 1u32..10_000_000,
        ) {
            let rec = JobTransferRecord {
                timestamp: DateTime::from_timestamp(secs, 0).unwrap(),
                submit_host: submit,
                worker_addr: IpAddr::from(ip),
                bytes,
                lost_pkts: lost,
                reorders,
                duration_s: f64::from(dur) / 100.0,
                geo: None,
            };
            let line = rec.to_line();
            let back = parse_line(&line, 1).unwrap().record;
            prop_assert_eq!(&back, &rec);
            prop_assert_eq!(back.to_line(), line);
        }
    }
}
