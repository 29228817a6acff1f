//! Pairwise status grid in text and static HTML form.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use meshmon::analytics::{
    classify_loss, classify_throughput, is_stale, loss_baseline, throughput_baseline,
};
use meshmon::measurement::{LatencySample, PathMeasurement, ThroughputResult};
use meshmon::store::{MeasurementStore, QueryFilter};
use meshmon::{HostId, Measurement, MetricKind, Severity, SimTime, Thresholds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CellStatus {
    Ok,
    Warn,
    Crit,
    Stale,
    NoData,
}

impl CellStatus {
    pub const ALL: [CellStatus; 5] = [
        CellStatus::Ok,
        CellStatus::Warn,
        CellStatus::Crit,
        CellStatus::Stale,
        CellStatus::NoData,
    ];

    /// Single-character code used in the text grid.
    pub fn code(self) -> char {
        match self {
            CellStatus::Ok => 'O',
            CellStatus::Warn => 'W',
            CellStatus::Crit => 'C',
            CellStatus::Stale => 'S',
            CellStatus::NoData => '.',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Warn => "warn",
            CellStatus::Crit => "crit",
            CellStatus::Stale => "stale",
            CellStatus::NoData => "nodata",
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.code() == c)
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    fn from_severity(s: Option<Severity>) -> Self {
        match s {
            None => CellStatus::Ok,
            Some(Severity::Warn) => CellStatus::Warn,
            Some(Severity::Critical) => CellStatus::Crit,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixCell {
    pub src: HostId,
    pub dst: HostId,
    pub status: CellStatus,
    /// Loss fraction, Mbps or path MTU bytes depending on the metric.
    pub latest: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub kind: MetricKind,
    pub hosts: Vec<HostId>,
    /// Row-major, `hosts.len()` squared; diagonal cells are `None`.
    pub cells: Vec<Option<MatrixCell>>,
}

/// Inputs for freshness evaluation at render time.
pub struct Freshness<'a> {
    pub now: SimTime,
    pub intervals: &'a BTreeMap<HostId, SimTime>,
}

fn latest_by_agent(store: &dyn MeasurementStore) -> BTreeMap<HostId, SimTime> {
    let mut out: BTreeMap<HostId, SimTime> = BTreeMap::new();
    for e in store.query(&QueryFilter::all()) {
        let v = out.entry(e.agent.clone()).or_insert(e.stored_at);
        *v = (*v).max(e.stored_at);
    }
    out
}

fn tail<T>(v: &[T], n: usize) -> &[T] {
    &v[v.len().saturating_sub(n)..]
}

fn latency_cell(series: &[LatencySample], t: &Thresholds) -> (CellStatus, Option<f64>) {
    let Some((last, prior)) = series.split_last() else {
        return (CellStatus::NoData, None);
    };
    let f = last.loss_fraction();
    let b = loss_baseline(tail(prior, t.loss_window)).ok();
    (
        CellStatus::from_severity(classify_loss(f, b.as_ref(), t)),
        Some(f),
    )
}

fn throughput_cell(series: &[ThroughputResult], t: &Thresholds) -> (CellStatus, Option<f64>) {
    let Some(last) = series.last() else {
        return (CellStatus::NoData, None);
    };
    let sev = throughput_baseline(series, t.throughput_window)
        .ok()
        .and_then(|b| classify_throughput(last.achieved_mbps, &b, t.throughput_rel_drop));
    (CellStatus::from_severity(sev), Some(last.achieved_mbps))
}

fn path_cell(series: &[PathMeasurement], t: &Thresholds) -> (CellStatus, Option<f64>) {
    let Some(last) = series.last() else {
        return (CellStatus::NoData, None);
    };
    let mtu_low = t.expected_mtu > 0 && last.path_mtu.is_some_and(|m| m < t.expected_mtu);
    let status = if !last.is_complete() || mtu_low {
        CellStatus::Warn
    } else {
        CellStatus::Ok
    };
    (status, last.path_mtu.map(f64::from))
}

/// Builds the grid for `kind` from store contents.
pub fn build_matrix(
    store: &dyn MeasurementStore,
    hosts: &[HostId],
    kind: MetricKind,
    thresholds: &Thresholds,
    freshness: &Freshness<'_>,
) -> Matrix {
    let latest = latest_by_agent(store);
    let stale = |h: &HostId| {
        freshness.intervals.get(h).is_some_and(|&iv| {
            is_stale(
                latest.get(h).copied(),
                freshness.now,
                thresholds.stale_k,
                iv,
            )
        })
    };
    let mut cells = Vec::with_capacity(hosts.len() * hosts.len());
    for src in hosts {
        for dst in hosts {
            if src == dst {
                cells.push(None);
                continue;
            }
            let envs = store.query(&QueryFilter::pair(src, dst, kind));
            let ms = envs.iter().map(|e| &e.measurement);
            let (status, value) = match kind {
                MetricKind::Latency => latency_cell(
                    &ms.filter_map(|m| match m {
                        Measurement::Latency(s) => Some(s.clone()),
                        _ => None,
                    })
                    .collect::<Vec<_>>(),
                    thresholds,
                ),
                MetricKind::Throughput => throughput_cell(
                    &ms.filter_map(|m| match m {
                        Measurement::Throughput(r) => Some(r.clone()),
                        _ => None,
                    })
                    .collect::<Vec<_>>(),
                    thresholds,
                ),
                MetricKind::Path => path_cell(
                    &ms.filter_map(|m| match m {
                        Measurement::Path(p) => Some(p.clone()),
                        _ => None,
                    })
                    .collect::<Vec<_>>(),
                    thresholds,
                ),
            };
            let status = if stale(src) || stale(dst) {
                CellStatus::Stale
            } else {
                status
            };
            cells.push(Some(MatrixCell {
                src: src.clone(),
                dst: dst.clone(),
                status,
                latest: value,
            }));
        }
    }
    Matrix {
        kind,
        hosts: hosts.to_vec(),
        cells,
    }
}

impl Matrix {
    pub fn cell(&self, src: &str, dst: &str) -> Option<&MatrixCell> {
        let i = self.hosts.iter().position(|h| h.as_str() == src)?;
        let j = self.hosts.iter().position(|h| h.as_str() == dst)?;
        self.cells[i * self.hosts.len() + j].as_ref()
    }

    /// Fixed-width grid: rows are sources, columns destinations. Each cell is
    /// one status code; the diagonal is `-`.
    pub fn to_text(&self) -> String {
        let w = self
            .hosts
            .iter()
            .map(|h| h.as_str().len())
            .max()
            .unwrap_or(1)
            .max(3);
        let mut out = format!("{} matrix (rows: src, columns: dst)\n", self.kind);
        let _ = write!(out, "{:w$}", "");
        for h in &self.hosts {
            let _ = write!(out, " {:>w$}", h.as_str());
        }
        out.push('\n');
        let n = self.hosts.len();
        for (i, src) in self.hosts.iter().enumerate() {
            let _ = write!(out, "{:w$}", src.as_str());
            for j in 0..n {
                let c = self.cells[i * n + j]
                    .as_ref()
                    .map_or('-', |c| c.status.code());
                let _ = write!(out, " {c:>w$}");
            }
            out.push('\n');
        }
        out.push_str("legend: O ok  W warn  C crit  S stale  . nodata  - self\n");
        out
    }

    /// Self-contained HTML page with one table cell per pair.
    pub fn to_html(&self) -> String {
        let mut out = String::new();
        let _ = write!(
            out,
            "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>{kind} matrix</title>\n<style>\n\
             table {{ border-collapse: collapse; font-family: sans-serif; }}\n\
             th, td {{ border: 1px solid #888; padding: 4px 8px; text-align: center; }}\n\
             td.ok {{ background: #7c7; }}\n td.warn {{ background: #ec5; }}\n td.crit {{ background: #e55; }}\n\
             td.stale {{ background: #a7c; }}\n td.nodata {{ background: #ddd; }}\n td.self {{ background: #fff; }}\n\
             </style>\n</head>\n<body>\n<h1>{kind} matrix</h1>\n<table>\n<tr><th>src \\ dst</th>",
            kind = self.kind
        );
        for h in &self.hosts {
            let _ = write!(out, "<th>{}</th>", h.as_str());
        }
        out.push_str("</tr>\n");
        let n = self.hosts.len();
        for (i, src) in self.hosts.iter().enumerate() {
            let _ = write!(out, "<tr><th>{}</th>", src.as_str());
            for j in 0..n {
                match &self.cells[i * n + j] {
                    None => out.push_str("<td class=\"self\">-</td>"),
                    Some(c) => {
                        let value = c.latest.map_or_else(|| "-".to_string(), |v| v.to_string());
                        let _ = write!(
                            out,
                            "<td class=\"{s}\" data-src=\"{}\" data-dst=\"{}\" title=\"{value}\">{s}</td>",
                            c.src.as_str(),
                            c.dst.as_str(),
                            s = c.status.name()
                        );
                    }
                }
            }
            out.push_str("</tr>\n");
        }
        out.push_str("</table>\n</body>\n</html>\n");
        out
    }
}

/// Reads statuses back from [`Matrix::to_text`] output, row-major.
pub fn parse_text_statuses(text: &str) -> Vec<Option<CellStatus>> {
    text.lines()
        .skip(2)
        .take_while(|l| !l.starts_with("legend:"))
        .flat_map(|l| {
            l.split_whitespace()
                .skip(1)
                .map(|tok| tok.chars().next().and_then(CellStatus::from_code))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Reads statuses back from [`Matrix::to_html`] output, row-major.
pub fn parse_html_statuses(html: &str) -> Vec<Option<CellStatus>> {
    html.split("<td class=\"")
        .skip(1)
        .map(|rest| {
            let class = &rest[..rest.find('"').unwrap_or(0)];
            CellStatus::from_name(class)
        })
        .collect()
}
