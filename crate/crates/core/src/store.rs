//! Tiered measurement storage.
//!
//! Each store keeps an in-memory index and, optionally, an append log file in
//! the envelope wire format (one envelope per line). [`ShortTermStore`] keeps
//! a sliding window and can be pruned; [`LongTermStore`] keeps everything and
//! can export a snapshot: the log lines in query order followed by a manifest
//! line `#manifest count=<n> sha256=<hex>`, where the hash covers every
//! preceding line including its trailing newline.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::envelope::{MeasurementEnvelope, RecordId};
use crate::ids::{HostId, SimTime};
use crate::measurement::MetricKind;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt record at {path}:{line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("snapshot {path} has no manifest line")]
    MissingManifest { path: PathBuf },
    #[error("snapshot checksum mismatch: manifest says {expected}, content hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("snapshot count mismatch: manifest says {expected}, found {actual}")]
    CountMismatch { expected: usize, actual: usize },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    Accepted,
    Duplicate,
}

/// Selects envelopes; absent fields match anything. The time range is `[from, to)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryFilter {
    pub src: Option<HostId>,
    pub dst: Option<HostId>,
    pub kind: Option<MetricKind>,
    pub from: SimTime,
    pub to: SimTime,
}

impl Default for QueryFilter {
    fn default() -> Self {
        Self::all()
    }
}

impl QueryFilter {
    pub fn all() -> Self {
        Self {
            src: None,
            dst: None,
            kind: None,
            from: 0,
            to: SimTime::MAX,
        }
    }

    pub fn pair(src: &HostId, dst: &HostId, kind: MetricKind) -> Self {
        Self {
            src: Some(src.clone()),
            dst: Some(dst.clone()),
            kind: Some(kind),
            ..Self::all()
        }
    }

    pub fn range(mut self, from: SimTime, to: SimTime) -> Self {
        self.from = from;
        self.to = to;
        self
    }

    pub fn matches(&self, e: &MeasurementEnvelope) -> bool {
        let t = e.start_time();
        t >= self.from
            && t < self.to
            && self.src.as_ref().is_none_or(|s| s == e.src())
            && self.dst.as_ref().is_none_or(|d| d == e.dst())
            && self.kind.is_none_or(|k| k == e.kind())
    }
}

#[derive(Default)]
struct Index {
    by_time: BTreeMap<(SimTime, RecordId), Arc<MeasurementEnvelope>>,
    /// id -> append sequence number
    ids: HashMap<RecordId, u64>,
    by_seq: BTreeMap<u64, Arc<MeasurementEnvelope>>,
    next_seq: u64,
}

impl Index {
    fn insert(&mut self, env: Arc<MeasurementEnvelope>) -> AppendOutcome {
        if self.ids.contains_key(&env.id) {
            return AppendOutcome::Duplicate;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.ids.insert(env.id, seq);
        self.by_time.insert((env.start_time(), env.id), env.clone());
        self.by_seq.insert(seq, env);
        AppendOutcome::Accepted
    }

    fn query(&self, f: &QueryFilter) -> Vec<Arc<MeasurementEnvelope>> {
        if f.from >= f.to {
            return Vec::new();
        }
        self.by_time
            .range((f.from, RecordId::MIN)..(f.to, RecordId::MIN))
            .map(|(_, e)| e)
            .filter(|e| f.matches(e))
            .cloned()
            .collect()
    }

    /// Removes every envelope with `start_time < cutoff`.
    fn remove_before(&mut self, cutoff: SimTime) -> usize {
        let keep = self.by_time.split_off(&(cutoff, RecordId::MIN));
        let removed = std::mem::replace(&mut self.by_time, keep);
        for e in removed.values() {
            if let Some(seq) = self.ids.remove(&e.id) {
                self.by_seq.remove(&seq);
            }
        }
        removed.len()
    }
}

struct AppendLog {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl AppendLog {
    fn append(&mut self, env: &MeasurementEnvelope) -> Result<(), StoreError> {
        writeln!(self.writer, "{}", env.to_line()).map_err(io_err(&self.path))
    }
}

/// State shared by both tiers.
struct Tier {
    index: RwLock<Index>,
    log: Mutex<Option<AppendLog>>,
}

impl Tier {
    fn in_memory() -> Self {
        Self {
            index: RwLock::new(Index::default()),
            log: Mutex::new(None),
        }
    }

    fn open(path: &Path) -> Result<Self, StoreError> {
        let mut index = Index::default();
        if path.exists() {
            for env in read_envelopes(path)? {
                index.insert(Arc::new(env));
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Self {
            index: RwLock::new(index),
            log: Mutex::new(Some(AppendLog {
                path: path.to_path_buf(),
                writer: BufWriter::new(file),
            })),
        })
    }

    fn append(&self, env: MeasurementEnvelope) -> Result<AppendOutcome, StoreError> {
        // The log lock serializes appends so file order matches index order.
        let mut log = self.log.lock().expect("store log lock poisoned");
        let env = Arc::new(env);
        let outcome = self
            .index
            .write()
            .expect("store index poisoned")
            .insert(env.clone());
        if outcome == AppendOutcome::Accepted {
            if let Some(log) = log.as_mut() {
                log.append(&env)?;
            }
        }
        Ok(outcome)
    }

    fn query(&self, f: &QueryFilter) -> Vec<Arc<MeasurementEnvelope>> {
        self.index.read().expect("store index poisoned").query(f)
    }

    fn len(&self) -> usize {
        self.index.read().expect("store index poisoned").ids.len()
    }

    fn flush(&self) -> Result<(), StoreError> {
        let mut log = self.log.lock().expect("store log lock poisoned");
        if let Some(l) = log.as_mut() {
            l.writer.flush().map_err(io_err(&l.path))?;
        }
        Ok(())
    }

    fn all_in_append_order(&self) -> Vec<Arc<MeasurementEnvelope>> {
        let idx = self.index.read().expect("store index poisoned");
        idx.by_seq.values().cloned().collect()
    }
}

fn read_envelopes(path: &Path) -> Result<Vec<MeasurementEnvelope>, StoreError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let env = MeasurementEnvelope::parse_line(&line).map_err(|e| StoreError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.reason,
        })?;
        out.push(env);
    }
    Ok(out)
}

/// Operations common to both tiers.
pub trait MeasurementStore {
    /// Idempotent by envelope id.
    fn append(&self, env: MeasurementEnvelope) -> Result<AppendOutcome, StoreError>;
    /// Matching envelopes ordered by start time, ties by id.
    fn query(&self, f: &QueryFilter) -> Vec<Arc<MeasurementEnvelope>>;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Writes buffered log lines to disk.
    fn flush(&self) -> Result<(), StoreError>;
}

/// Windowed store: keeps envelopes whose start time is within `window` of now.
pub struct ShortTermStore {
    tier: Tier,
    window: SimTime,
}

impl ShortTermStore {
    pub fn in_memory(window: SimTime) -> Self {
        assert!(window > 0, "retention window must be > 0");
        Self {
            tier: Tier::in_memory(),
            window,
        }
    }

    pub fn open(path: &Path, window: SimTime) -> Result<Self, StoreError> {
        assert!(window > 0, "retention window must be > 0");
        Ok(Self {
            tier: Tier::open(path)?,
            window,
        })
    }

    pub fn window(&self) -> SimTime {
        self.window
    }

    /// Removes envelopes with `start_time < now - window` and compacts the log.
    pub fn prune(&self, now: SimTime) -> Result<usize, StoreError> {
        let cutoff = now.saturating_sub(self.window);
        let mut log = self.tier.log.lock().expect("store log lock poisoned");
        let removed = self
            .tier
            .index
            .write()
            .expect("store index poisoned")
            .remove_before(cutoff);
        if removed > 0 {
            if let Some(l) = log.as_mut() {
                let tmp = l.path.with_extension("compact");
                {
                    let mut w = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
                    for env in self.tier.all_in_append_order() {
                        writeln!(w, "{}", env.to_line()).map_err(io_err(&tmp))?;
                    }
                    w.flush().map_err(io_err(&tmp))?;
                }
                l.writer.flush().map_err(io_err(&l.path))?;
                fs::rename(&tmp, &l.path).map_err(io_err(&l.path))?;
                let file = OpenOptions::new()
                    .append(true)
                    .open(&l.path)
                    .map_err(io_err(&l.path))?;
                l.writer = BufWriter::new(file);
            }
        }
        Ok(removed)
    }
}

impl MeasurementStore for ShortTermStore {
    fn append(&self, env: MeasurementEnvelope) -> Result<AppendOutcome, StoreError> {
        self.tier.append(env)
    }

    fn query(&self, f: &QueryFilter) -> Vec<Arc<MeasurementEnvelope>> {
        self.tier.query(f)
    }

    fn len(&self) -> usize {
        self.tier.len()
    }

    fn flush(&self) -> Result<(), StoreError> {
        self.tier.flush()
    }
}

/// Append-only store of the entire dataset. It has no prune operation.
pub struct LongTermStore {
    tier: Tier,
}

/// Result of a snapshot export.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub count: usize,
    pub checksum: String,
}

impl Manifest {
    fn line(&self) -> String {
        format!("#manifest count={} sha256={}", self.count, self.checksum)
    }

    fn parse(line: &str) -> Option<Self> {
        let rest = line.strip_prefix("#manifest count=")?;
        let (count, checksum) = rest.split_once(" sha256=")?;
        Some(Self {
            count: count.parse().ok()?,
            checksum: checksum.to_string(),
        })
    }
}

impl LongTermStore {
    pub fn in_memory() -> Self {
        Self {
            tier: Tier::in_memory(),
        }
    }

    pub fn open(path: &Path) -> Result<Self, StoreError> {
        Ok(Self {
            tier: Tier::open(path)?,
        })
    }

    /// Writes every envelope in query order plus a manifest line to `dest`.
    pub fn export_snapshot(&self, dest: &Path) -> Result<Manifest, StoreError> {
        let envs = self.query(&QueryFilter::all());
        let mut hasher = Sha256::new();
        let mut w = BufWriter::new(File::create(dest).map_err(io_err(dest))?);
        for e in &envs {
            let line = format!("{}\n", e.to_line());
            hasher.update(line.as_bytes());
            w.write_all(line.as_bytes()).map_err(io_err(dest))?;
        }
        let manifest = Manifest {
            count: envs.len(),
            checksum: hex::encode(hasher.finalize()),
        };
        writeln!(w, "{}", manifest.line()).map_err(io_err(dest))?;
        w.flush().map_err(io_err(dest))?;
        Ok(manifest)
    }

    /// Verifies a snapshot and loads it into `self`.
    pub fn import_snapshot(&self, src: &Path) -> Result<Manifest, StoreError> {
        let bytes = fs::read(src).map_err(io_err(src))?;
        let text = String::from_utf8_lossy(&bytes);
        let body_end = text.trim_end_matches('\n').rfind('\n').map_or(0, |i| i + 1);
        let (body, manifest_line) = text.split_at(body_end);
        let manifest = Manifest::parse(manifest_line.trim_end_matches('\n')).ok_or_else(|| {
            StoreError::MissingManifest {
                path: src.to_path_buf(),
            }
        })?;
        let actual = hex::encode(Sha256::digest(body.as_bytes()));
        if actual != manifest.checksum {
            return Err(StoreError::ChecksumMismatch {
                expected: manifest.checksum,
                actual,
            });
        }
        let lines: Vec<&str> = body.lines().collect();
        if lines.len() != manifest.count {
            return Err(StoreError::CountMismatch {
                expected: manifest.count,
                actual: lines.len(),
            });
        }
        for (i, line) in lines.into_iter().enumerate() {
            let env = MeasurementEnvelope::parse_line(line).map_err(|e| StoreError::Corrupt {
                path: src.to_path_buf(),
                line: i + 1,
                reason: e.reason,
            })?;
            self.append(env)?;
        }
        Ok(manifest)
    }
}

impl MeasurementStore for LongTermStore {
    fn append(&self, env: MeasurementEnvelope) -> Result<AppendOutcome, StoreError> {
        self.tier.append(env)
    }

    fn query(&self, f: &QueryFilter) -> Vec<Arc<MeasurementEnvelope>> {
        self.tier.query(f)
    }

    fn len(&self) -> usize {
        self.tier.len()
    }

    fn flush(&self) -> Result<(), StoreError> {
        self.tier.flush()
    }
}

impl Drop for Tier {
    fn drop(&mut self) {
        if let Ok(mut log) = self.log.lock() {
            if let Some(l) = log.as_mut() {
                let _ = l.writer.flush();
            }
        }
    }
}

/// Reads a store log file without opening it for writing.
pub fn read_log(path: &Path) -> Result<Vec<MeasurementEnvelope>, StoreError> {
    read_envelopes(path)
}
