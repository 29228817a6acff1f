//! Command implementations behind the `meshmon` binary.
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on usage errors.

pub mod matrix;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use meshmon::analytics::{distinct_paths, Alert, AlertKind};
use meshmon::jobsingest::{
    aggregate_bytes_by_destination, geo_annotate, parse_log, GeoTable, GroupBy,
};
use meshmon::measurement::PathMeasurement;
use meshmon::scenario::{
    self, RunMeta, RunOptions, Scenario, ALERT_LOG, LONG_TERM_LOG, SHORT_TERM_LOG,
};
use meshmon::store::{read_log, LongTermStore, MeasurementStore, QueryFilter};
use meshmon::{HostId, Measurement, MetricKind, SimTime};

use crate::matrix::{build_matrix, Freshness};

/// An error caused by the invocation rather than by the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::error::Error for UsageError {}

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}

/// Parses a simulated-time flag: an integer with an optional unit suffix
/// `ms`, `s`, `m` or `h`. A bare integer is seconds.
pub fn parse_sim_time(s: &str) -> Result<SimTime, String> {
    let (digits, mult) = if let Some(d) = s.strip_suffix("ms") {
        (d, 1)
    } else if let Some(d) = s.strip_suffix('s') {
        (d, 1000)
    } else if let Some(d) = s.strip_suffix('m') {
        (d, 60_000)
    } else if let Some(d) = s.strip_suffix('h') {
        (d, 3_600_000)
    } else {
        (s, 1000)
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!(
            "invalid time {s:?}; expected e.g. 90, 500ms, 30s, 15m or 2h"
        ));
    }
    digits
        .parse::<u64>()
        .ok()
        .and_then(|v| v.checked_mul(mult))
        .ok_or_else(|| format!("time {s:?} out of range"))
}

fn parse_host(s: &str) -> Result<HostId, String> {
    let h = HostId::new(s);
    if h.is_valid() {
        Ok(h)
    } else {
        Err(format!("invalid host id {s:?}"))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "meshmon",
    version,
    about = "Mesh network measurement on a simulated network"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Latency,
    Throughput,
    Path,
}

impl From<Kind> for MetricKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Latency => MetricKind::Latency,
            Kind::Throughput => MetricKind::Throughput,
            Kind::Path => MetricKind::Path,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Tier {
    Short,
    Long,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlertKindArg {
    RouteChange,
    MtuViolation,
    LossAnomaly,
    ThroughputDegradation,
    StaleAgent,
}

impl From<AlertKindArg> for AlertKind {
    fn from(k: AlertKindArg) -> Self {
        match k {
            AlertKindArg::RouteChange => AlertKind::RouteChange,
            AlertKindArg::MtuViolation => AlertKind::MtuViolation,
            AlertKindArg::LossAnomaly => AlertKind::LossAnomaly,
            AlertKindArg::ThroughputDegradation => AlertKind::ThroughputDegradation,
            AlertKindArg::StaleAgent => AlertKind::StaleAgent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupArg {
    Region,
    Prefix,
}

/// Where to read stored envelopes from.
#[derive(Debug, Args)]
pub struct StoreArgs {
    /// Output directory of a `run`.
    #[arg(long, default_value = "out")]
    pub dir: PathBuf,
    /// Store tier to read.
    #[arg(long, value_enum, default_value = "long")]
    pub tier: Tier,
}

impl StoreArgs {
    fn log_path(&self) -> PathBuf {
        self.dir.join(match self.tier {
            Tier::Short => SHORT_TERM_LOG,
            Tier::Long => LONG_TERM_LOG,
        })
    }

    fn load(&self) -> Result<LongTermStore> {
        let p = self.log_path();
        let store = LongTermStore::in_memory();
        for e in read_log(&p).with_context(|| format!("reading store {}", p.display()))? {
            store.append(e)?;
        }
        Ok(store)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario end to end and write stores, alerts and metadata.
    Run {
        scenario: PathBuf,
        /// Output directory; existing run files in it are replaced.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the scenario duration.
        #[arg(long, value_parser = parse_sim_time)]
        duration: Option<SimTime>,
    },
    /// Print stored envelopes matching a filter, in wire format.
    Query {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long, value_parser = parse_host)]
        src: Option<HostId>,
        #[arg(long, value_parser = parse_host)]
        dst: Option<HostId>,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        /// Inclusive start of the start-time range.
        #[arg(long, value_parser = parse_sim_time)]
        from: Option<SimTime>,
        /// Exclusive end of the start-time range.
        #[arg(long, value_parser = parse_sim_time)]
        to: Option<SimTime>,
    },
    /// Print alert log lines in chronological order.
    Alerts {
        #[arg(long, default_value = "out")]
        dir: PathBuf,
        /// Only alerts raised at or after this time.
        #[arg(long, value_parser = parse_sim_time)]
        since: Option<SimTime>,
        #[arg(long, value_enum)]
        kind: Option<AlertKindArg>,
    },
    /// Render the pairwise status matrix for one metric.
    Matrix {
        #[arg(long, default_value = "out")]
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "latency")]
        kind: Kind,
        /// Also write a static HTML page to this file.
        #[arg(long)]
        html: Option<PathBuf>,
    },
    /// Report the distinct paths observed between two hosts.
    Paths {
        #[arg(long, default_value = "out")]
        dir: PathBuf,
        #[arg(long, value_parser = parse_host)]
        src: HostId,
        #[arg(long, value_parser = parse_host)]
        dst: HostId,
        #[arg(long, value_parser = parse_sim_time)]
        from: Option<SimTime>,
        #[arg(long, value_parser = parse_sim_time)]
        to: Option<SimTime>,
    },
    /// Aggregate job-transfer logs by destination.
    Jobs {
        log: PathBuf,
        /// Geo table of `prefix,region,lat,lon` lines.
        #[arg(long)]
        geo: PathBuf,
        #[arg(long, value_enum, default_value = "region")]
        group_by: GroupArg,
        /// IPv4 prefix length for `--group-by prefix`.
        #[arg(long, default_value_t = 24, value_parser = clap::value_parser!(u8).range(0..=32))]
        prefix_len: u8,
        /// Print a `region, lat, lon, bytes` point list instead of the table.
        #[arg(long)]
        points: bool,
    },
    /// Export the long-term store of a run as a checksummed snapshot.
    Snapshot {
        #[arg(long, default_value = "out")]
        dir: PathBuf,
        dest: PathBuf,
    },
    /// Verify a snapshot and print its manifest.
    Verify { snapshot: PathBuf },
}

/// Runs a parsed command, writing its report to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Run {
            scenario,
            out: dir,
            duration,
        } => cmd_run(&scenario, &dir, duration, out),
        Command::Query {
            store,
            src,
            dst,
            kind,
            from,
            to,
        } => {
            let from = from.unwrap_or(0);
            let to = to.unwrap_or(SimTime::MAX);
            if from > to {
                return Err(usage(format!("--from ({from} ms) is after --to ({to} ms)")));
            }
            let filter = QueryFilter {
                src,
                dst,
                kind: kind.map(Into::into),
                from,
                to,
            };
            for e in store.load()?.query(&filter) {
                writeln!(out, "{}", e.to_line())?;
            }
            Ok(())
        }
        Command::Alerts { dir, since, kind } => cmd_alerts(&dir, since, kind.map(Into::into), out),
        Command::Matrix { dir, kind, html } => cmd_matrix(&dir, kind.into(), html.as_deref(), out),
        Command::Paths {
            dir,
            src,
            dst,
            from,
            to,
        } => {
            let from = from.unwrap_or(0);
            let to = to.unwrap_or(SimTime::MAX);
            if from > to {
                return Err(usage(format!("--from ({from} ms) is after --to ({to} ms)")));
            }
            cmd_paths(&dir, &src, &dst, from, to, out)
        }
        Command::Jobs {
            log,
            geo,
            group_by,
            prefix_len,
            points,
        } => cmd_jobs(&log, &geo, group_by, prefix_len, points, out),
        Command::Snapshot { dir, dest } => {
            let store = StoreArgs {
                dir,
                tier: Tier::Long,
            }
            .load()?;
            let m = store.export_snapshot(&dest)?;
            writeln!(out, "count={} sha256={}", m.count, m.checksum)?;
            Ok(())
        }
        Command::Verify { snapshot } => {
            let m = LongTermStore::in_memory().import_snapshot(&snapshot)?;
            writeln!(out, "ok count={} sha256={}", m.count, m.checksum)?;
            Ok(())
        }
    }
}

fn cmd_run(path: &Path, dir: &Path, duration: Option<SimTime>, out: &mut dyn Write) -> Result<()> {
    let sc = Scenario::load(path)?;
    let report = scenario::run(
        &sc,
        &RunOptions {
            duration,
            output_dir: Some(dir.to_path_buf()),
            check_invariants: false,
        },
    )?;
    let s = &report.stats;
    writeln!(
        out,
        "simulated {} s: produced={} skipped={} failed={} published={} short_term={} long_term={} pruned={} alerts={}",
        report.end / 1000,
        s.produced,
        s.skipped,
        s.failed,
        s.published,
        s.short_term_len,
        s.long_term_len,
        s.pruned,
        report.alerts.len()
    )?;
    Ok(())
}

fn cmd_alerts(
    dir: &Path,
    since: Option<SimTime>,
    kind: Option<AlertKind>,
    out: &mut dyn Write,
) -> Result<()> {
    let p = dir.join(ALERT_LOG);
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    let mut alerts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let a = Alert::parse_line(line).with_context(|| format!("{}:{}", p.display(), i + 1))?;
        if since.is_none_or(|t| a.raised_at >= t) && kind.is_none_or(|k| a.kind == k) {
            alerts.push((a.raised_at, line));
        }
    }
    alerts.sort_by_key(|(t, _)| *t);
    for (_, line) in alerts {
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn cmd_matrix(
    dir: &Path,
    kind: MetricKind,
    html: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let meta = RunMeta::load(dir)?;
    let store = StoreArgs {
        dir: dir.to_path_buf(),
        tier: Tier::Long,
    }
    .load()?;
    let hosts: Vec<HostId> = meta.hosts.iter().map(HostId::new).collect();
    let intervals: BTreeMap<HostId, SimTime> = meta
        .shortest_interval_ms
        .iter()
        .map(|(h, v)| (HostId::new(h), *v))
        .collect();
    let m = build_matrix(
        &store,
        &hosts,
        kind,
        &meta.thresholds,
        &Freshness {
            now: meta.end_ms,
            intervals: &intervals,
        },
    );
    out.write_all(m.to_text().as_bytes())?;
    if let Some(p) = html {
        fs::write(p, m.to_html()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_paths(
    dir: &Path,
    src: &HostId,
    dst: &HostId,
    from: SimTime,
    to: SimTime,
    out: &mut dyn Write,
) -> Result<()> {
    let store = StoreArgs {
        dir: dir.to_path_buf(),
        tier: Tier::Long,
    }
    .load()?;
    let series: Vec<PathMeasurement> = store
        .query(&QueryFilter::pair(src, dst, MetricKind::Path))
        .iter()
        .filter_map(|e| match &e.measurement {
            Measurement::Path(p) => Some(p.clone()),
            _ => None,
        })
        .collect();
    let paths = distinct_paths(&series, from, to);
    if paths.is_empty() {
        writeln!(out, "no data for {src}>{dst}")?;
        return Ok(());
    }
    writeln!(out, "{} distinct path(s) for {src}>{dst}", paths.len())?;
    for (i, p) in paths.iter().enumerate() {
        writeln!(
            out,
            "path {}: signature={} count={} first_seen={} last_seen={}\n  hops: {}",
            i + 1,
            p.signature.short(),
            p.count,
            p.first_seen,
            p.last_seen,
            p.signature.hop_list().replace(',', " -> ")
        )?;
    }
    Ok(())
}

fn cmd_jobs(
    log: &Path,
    geo: &Path,
    group_by: GroupArg,
    prefix_len: u8,
    points: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let table = GeoTable::parse(
        &fs::read_to_string(geo).with_context(|| format!("reading {}", geo.display()))?,
    )?;
    let f = fs::File::open(log).with_context(|| format!("reading {}", log.display()))?;
    let parsed = parse_log(BufReader::new(f))?;
    for e in &parsed.errors {
        log::warn!("{}: {e}", log.display());
    }
    if parsed.unknown_keys > 0 {
        log::warn!(
            "{}: {} unknown keys ignored",
            log.display(),
            parsed.unknown_keys
        );
    }
    let records: Vec<_> = parsed
        .records
        .into_iter()
        .map(|r| geo_annotate(r, &table))
        .collect();
    if points {
        let rows = aggregate_bytes_by_destination(&records, GroupBy::Region);
        let coords: BTreeMap<&str, (f64, f64)> = table
            .entries()
            .iter()
            .map(|e| (e.region.as_str(), (e.latitude, e.longitude)))
            .collect();
        for r in rows {
            if let Some((lat, lon)) = coords.get(r.group.as_str()) {
                writeln!(out, "{}\t{lat}\t{lon}\t{}", r.group, r.total_bytes)?;
            }
        }
    } else {
        let by = match group_by {
            GroupArg::Region => GroupBy::Region,
            GroupArg::Prefix => GroupBy::WorkerPrefix(prefix_len),
        };
        for r in aggregate_bytes_by_destination(&records, by) {
            writeln!(out, "{r}")?;
        }
    }
    if !parsed.errors.is_empty() {
        bail!(
            "{} malformed line(s) in {}",
            parsed.errors.len(),
            log.display()
        );
    }
    Ok(())
}
