//! Append-only experiment log.
//!
//! A store is a directory:
//!
//! - `runs.jsonl`: one [`RunRecord`] per line.
//! - `epochs.jsonl`: one [`EpochEntry`] per line.
//! - `trackers.jsonl`: a [`BestTracker`] line each time a run's best epoch changes.
//! - `.lock`: present while a writer holds the store.
//!
//! Timestamps are RFC 3339 UTC. Readers never take the lock and ignore an
//! unterminated last line; the writer truncates such a line on open.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::DatasetId;

pub const RUNS_FILE: &str = "runs.jsonl";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const TRACKERS_FILE: &str = "trackers.jsonl";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store is locked by another writer ({0} exists)")]
    Locked(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: corrupt record: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unknown run_id {0:?}")]
    UnknownRun(String),
    #[error("run {run_id}: epoch {got} does not follow epoch {last}")]
    NonMonotonicEpoch { run_id: String, last: u64, got: u64 },
    #[error("invalid entry: {0}")]
    InvalidEntry(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One experiment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub config_snapshot: Value,
    pub config_hash: String,
    pub dataset: DatasetId,
    pub notes: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEntry {
    pub run_id: String,
    pub epoch: u64,
    #[serde(default)]
    pub train_loss: Option<f64>,
    pub val_mae: f64,
    pub val_mse: f64,
    pub wall_time_s: f64,
}

/// Best epoch of a run by validation MAE; ties keep the earliest epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestTracker {
    pub run_id: String,
    pub best_epoch: u64,
    pub best_mae: f64,
    pub best_mse_at_best_mae: f64,
}

impl BestTracker {
    fn from_entry(e: &EpochEntry) -> Self {
        Self {
            run_id: e.run_id.clone(),
            best_epoch: e.epoch,
            best_mae: e.val_mae,
            best_mse_at_best_mae: e.val_mse,
        }
    }

    /// Folds one more epoch in. Returns whether the tracker changed.
    pub fn update(&mut self, e: &EpochEntry) -> bool {
        if e.val_mae < self.best_mae {
            *self = Self::from_entry(e);
            true
        } else {
            false
        }
    }
}

/// Rebuilds every run's tracker from its epoch entries, in file order.
pub fn replay_trackers<'a, I>(entries: I) -> BTreeMap<String, BestTracker>
where
    I: IntoIterator<Item = &'a EpochEntry>,
{
    let mut out: BTreeMap<String, BestTracker> = BTreeMap::new();
    for e in entries {
        match out.get_mut(&e.run_id) {
            Some(t) => {
                t.update(e);
            }
            None => {
                out.insert(e.run_id.clone(), BestTracker::from_entry(e));
            }
        }
    }
    out
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_canonical(v, &mut out);
    out
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("string serializes"));
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

/// Hex SHA-256 of the canonical form.
pub fn config_hash(v: &Value) -> String {
    hex::encode(Sha256::digest(canonical_json(v).as_bytes()))
}

const CROCKFORD: &[u8; 32] = b"0123456789ABCDEFGHJKMNPQRSTVWXYZ";

/// 26-character Crockford base32 id: 48-bit millisecond timestamp followed
/// by 80 random bits, so ids sort by creation time.
pub fn new_run_id(at: DateTime<Utc>) -> String {
    let ms = at.timestamp_millis().max(0) as u128 & ((1 << 48) - 1);
    let rand_bits: u128 = rand::rng().random::<u128>() & ((1 << 80) - 1);
    let v = (ms << 80) | rand_bits;
    (0..26)
        .rev()
        .map(|i| CROCKFORD[((v >> (5 * i)) & 31) as usize] as char)
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunFilter {
    pub dataset: Option<DatasetId>,
    pub run_id: Option<String>,
    /// Inclusive lower bound on `created_at`.
    pub since: Option<DateTime<Utc>>,
}

impl RunFilter {
    fn matches(&self, r: &RunRecord) -> bool {
        self.dataset.is_none_or(|d| d == r.dataset)
            && self.run_id.as_ref().is_none_or(|id| *id == r.run_id)
            && self.since.is_none_or(|t| r.created_at >= t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub record: RunRecord,
    pub tracker: Option<BestTracker>,
}

/// Parsed store contents.
#[derive(Clone, Debug, Default)]
pub struct Snapshot {
    pub runs: Vec<RunRecord>,
    pub epochs: Vec<EpochEntry>,
    /// Latest stored tracker per run.
    pub trackers: BTreeMap<String, BestTracker>,
}

impl Snapshot {
    /// Runs matching `filter`, ordered by `created_at` then `run_id`.
    pub fn query(&self, filter: &RunFilter) -> Vec<RunSummary> {
        let mut out: Vec<RunSummary> = self
            .runs
            .iter()
            .filter(|r| filter.matches(r))
            .map(|r| RunSummary {
                record: r.clone(),
                tracker: self.trackers.get(&r.run_id).cloned(),
            })
            .collect();
        out.sort_by(|a, b| {
            a.record
                .created_at
                .cmp(&b.record.created_at)
                .then_with(|| a.record.run_id.cmp(&b.record.run_id))
        });
        out
    }
}

/// Lines of a JSON-lines file plus the byte length of its terminated prefix.
struct Parsed<T> {
    items: Vec<T>,
    good_len: u64,
    partial_tail: bool,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Parsed<T>, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(io_err(path)(e)),
    };
    let good_len = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let mut items = Vec::new();
    for (i, line) in bytes[..good_len].split(|&b| b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let item = serde_json::from_slice(line).map_err(|e| StoreError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(Parsed {
        items,
        good_len: good_len as u64,
        partial_tail: good_len < bytes.len(),
    })
}

/// Reads a store without taking the lock.
pub fn read_store(dir: &Path) -> Result<Snapshot, StoreError> {
    let runs = read_jsonl::<RunRecord>(&dir.join(RUNS_FILE))?.items;
    let epochs = read_jsonl::<EpochEntry>(&dir.join(EPOCHS_FILE))?.items;
    let mut trackers = BTreeMap::new();
    for t in read_jsonl::<BestTracker>(&dir.join(TRACKERS_FILE))?.items {
        trackers.insert(t.run_id.clone(), t);
    }
    Ok(Snapshot { runs, epochs, trackers })
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Single-writer handle on a store directory.
pub struct Store {
    dir: PathBuf,
    snapshot: Snapshot,
    last_epoch: HashMap<String, u64>,
    recovery_notes: Vec<String>,
    _lock: LockGuard,
}

/// Opens (creating if needed) a store for writing.
///
/// Fails with [`StoreError::Locked`] while another writer holds it. An
/// unterminated trailing line left by a crash is truncated, and a stored
/// tracker that disagrees with the epoch log is re-appended from replay;
/// both are reported in [`Store::recovery_notes`].
pub fn open_store(dir: &Path) -> Result<Store, StoreError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let lock_path = dir.join(LOCK_FILE);
    let mut lock = match OpenOptions::new().write(true).create_new(true).open(&lock_path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            return Err(StoreError::Locked(lock_path));
        }
        Err(e) => return Err(io_err(&lock_path)(e)),
    };
    let guard = LockGuard(lock_path.clone());
    writeln!(lock, "{}", std::process::id()).map_err(io_err(&lock_path))?;

    let mut notes = Vec::new();
    for name in [RUNS_FILE, EPOCHS_FILE, TRACKERS_FILE] {
        let path = dir.join(name);
        let parsed = read_jsonl::<Value>(&path)?;
        if parsed.partial_tail {
            let f = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
            f.set_len(parsed.good_len).map_err(io_err(&path))?;
            f.sync_all().map_err(io_err(&path))?;
            notes.push(format!(
                "{name}: truncated partial trailing record at byte {}",
                parsed.good_len
            ));
        }
    }

    let snapshot = read_store(dir)?;
    let mut last_epoch = HashMap::new();
    for e in &snapshot.epochs {
        last_epoch.insert(e.run_id.clone(), e.epoch);
    }
    let mut store = Store {
        dir: dir.to_path_buf(),
        snapshot,
        last_epoch,
        recovery_notes: notes,
        _lock: guard,
    };

    let replayed = replay_trackers(&store.snapshot.epochs);
    for (run_id, t) in replayed {
        if store.snapshot.trackers.get(&run_id) != Some(&t) {
            store.append(TRACKERS_FILE, &t)?;
            store
                .recovery_notes
                .push(format!("{run_id}: stored best tracker rebuilt from epoch log"));
            store.snapshot.trackers.insert(run_id, t);
        }
    }
    Ok(store)
}

impl Store {
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn recovery_notes(&self) -> &[String] {
        &self.recovery_notes
    }

    pub fn snapshot(&self) -> &Snapshot {
        &self.snapshot
    }

    fn append<T: Serialize>(&self, file: &str, item: &T) -> Result<(), StoreError> {
        let path = self.dir.join(file);
        let mut line = serde_json::to_string(item)?;
        line.push('\n');
        let mut f: File = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        f.write_all(line.as_bytes()).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))
    }

    pub fn create_run(&mut self, dataset: DatasetId, config: &Value, notes: &str) -> Result<RunRecord, StoreError> {
        self.create_run_at(dataset, config, notes, Utc::now())
    }

    pub fn create_run_at(
        &mut self,
        dataset: DatasetId,
        config: &Value,
        notes: &str,
        created_at: DateTime<Utc>,
    ) -> Result<RunRecord, StoreError> {
        let run_id = loop {
            let id = new_run_id(created_at);
            if !self.snapshot.runs.iter().any(|r| r.run_id == id) {
                break id;
            }
        };
        let snapshot: Value = serde_json::from_str(&canonical_json(config))?;
        let record = RunRecord {
            run_id,
            created_at,
            config_hash: config_hash(&snapshot),
            config_snapshot: snapshot,
            dataset,
            notes: notes.to_string(),
        };
        self.append(RUNS_FILE, &record)?;
        self.snapshot.runs.push(record.clone());
        Ok(record)
    }

    /// Appends an epoch and returns the run's (possibly updated) best tracker.
    pub fn record_epoch(&mut self, entry: EpochEntry) -> Result<BestTracker, StoreError> {
        if !self.snapshot.runs.iter().any(|r| r.run_id == entry.run_id) {
            return Err(StoreError::UnknownRun(entry.run_id));
        }
        if let Some(&last) = self.last_epoch.get(&entry.run_id) {
            if entry.epoch <= last {
                return Err(StoreError::NonMonotonicEpoch {
                    run_id: entry.run_id,
                    last,
                    got: entry.epoch,
                });
            }
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(entry.val_mae) || !finite_nonneg(entry.val_mse) || !finite_nonneg(entry.wall_time_s) {
            return Err(StoreError::InvalidEntry(
                "val_mae, val_mse and wall_time_s must be finite and non-negative".into(),
            ));
        }
        if entry.train_loss.is_some_and(|l| !l.is_finite()) {
            return Err(StoreError::InvalidEntry("train_loss must be finite".into()));
        }

        self.append(EPOCHS_FILE, &entry)?;
        self.last_epoch.insert(entry.run_id.clone(), entry.epoch);

        let changed = match self.snapshot.trackers.get_mut(&entry.run_id) {
            Some(t) => t.update(&entry),
            None => {
                self.snapshot
                    .trackers
                    .insert(entry.run_id.clone(), BestTracker::from_entry(&entry));
                true
            }
        };
        let tracker = self.snapshot.trackers[&entry.run_id].clone();
        if changed {
            self.append(TRACKERS_FILE, &tracker)?;
        }
        self.snapshot.epochs.push(entry);
        Ok(tracker)
    }

    pub fn query(&self, filter: &RunFilter) -> Vec<RunSummary> {
        self.snapshot.query(filter)
    }
}
