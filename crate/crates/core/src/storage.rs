//! Append-only persistence of committed cycle reports.
//!
//! [`FileSink`] keeps one log per scenario at `<dir>/<scenario_id>.log`, one
//! JSON object per line:
//!
//! ```text
//! {"v":1,"scenario_id":"table1","cycle_index":0,"term":0,"master":0,"ingested_at":300250,"events":500,"case1":{...},"case2":{...},"batches":["0.0.0",...]}
//! ```
//!
//! `v` is the record format version. A line is only complete once its
//! newline is on disk; a trailing fragment left by a crash mid-write is
//! ignored by readers. Records are keyed by `(scenario_id, cycle_index,
//! term)` and re-appending a key is a no-op.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Millis, NodeId};
use crate::mapreduce::{Case1Result, Case2Result};
use crate::membership::Term;

pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("report sink unavailable: {0}")]
    SinkUnavailable(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("scenario id `{0}` must be non-empty and use only [A-Za-z0-9._-]")]
    InvalidScenarioId(String),
    #[error("corrupt record at {path}:{line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

impl From<io::Error> for StorageError {
    fn from(e: io::Error) -> Self {
        StorageError::SinkUnavailable(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub v: u32,
    pub scenario_id: String,
    pub cycle_index: u64,
    pub term: Term,
    pub master: NodeId,
    /// Time of the commit, on the committing node's clock.
    pub ingested_at: Millis,
    pub events: u64,
    pub case1: Case1Result,
    pub case2: Case2Result,
    /// Mapper batches folded into this record.
    pub batches: Vec<String>,
}

impl MeasurementRecord {
    pub fn key(&self) -> (String, u64, Term) {
        (self.scenario_id.clone(), self.cycle_index, self.term)
    }
}

/// Where masters upload committed cycles. Shared by every node of a
/// scenario; only the current master writes.
pub trait ReportSink {
    /// Makes `scenario_id` known, with no records yet.
    fn open_scenario(&mut self, scenario_id: &str) -> Result<(), StorageError>;

    /// Appends `record`; re-appending the same key succeeds without writing.
    fn append_report(&mut self, record: &MeasurementRecord) -> Result<(), StorageError>;

    /// All records of a scenario in `(cycle_index, term)` order.
    fn export(&self, scenario_id: &str) -> Result<Vec<MeasurementRecord>, StorageError>;

    fn has_cycle(&self, scenario_id: &str, cycle_index: u64) -> Result<bool, StorageError> {
        Ok(self
            .export(scenario_id)?
            .iter()
            .any(|r| r.cycle_index == cycle_index))
    }

    fn last_cycle(&self, scenario_id: &str) -> Result<Option<u64>, StorageError> {
        Ok(self.export(scenario_id)?.iter().map(|r| r.cycle_index).max())
    }

    fn committed_batches(&self, scenario_id: &str) -> Result<BTreeSet<String>, StorageError> {
        Ok(self
            .export(scenario_id)?
            .into_iter()
            .flat_map(|r| r.batches)
            .collect())
    }

    /// Appends `record` only if its cycle has no record yet and none of its
    /// batches were committed before. Callers sharing a sink across threads
    /// must hold their lock for the whole call.
    fn try_commit(&mut self, record: &MeasurementRecord) -> Result<CommitOutcome, StorageError> {
        let existing = self.export(&record.scenario_id).or_else(|e| match e {
            StorageError::UnknownScenario(_) => Ok(Vec::new()),
            e => Err(e),
        })?;
        if existing.iter().any(|r| r.cycle_index == record.cycle_index) {
            return Ok(CommitOutcome::CycleExists);
        }
        let committed: BTreeSet<String> = existing.into_iter().flat_map(|r| r.batches).collect();
        let taken: BTreeSet<String> = record
            .batches
            .iter()
            .filter(|b| committed.contains(*b))
            .cloned()
            .collect();
        if !taken.is_empty() {
            return Ok(CommitOutcome::BatchesTaken(taken));
        }
        self.append_report(record)?;
        Ok(CommitOutcome::Committed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommitOutcome {
    Committed,
    /// Another master already uploaded this cycle.
    CycleExists,
    /// Some batches already landed in an earlier record.
    BatchesTaken(BTreeSet<String>),
}

fn check_id(id: &str) -> Result<(), StorageError> {
    let ok = !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(StorageError::InvalidScenarioId(id.to_string()))
    }
}

fn sorted(mut records: Vec<MeasurementRecord>) -> Vec<MeasurementRecord> {
    records.sort_by_key(|r| (r.cycle_index, r.term));
    records
}

/// In-process sink. `fail_next` makes the next appends report
/// [`StorageError::SinkUnavailable`].
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    scenarios: BTreeMap<String, Vec<MeasurementRecord>>,
    pub fail_next: u32,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ReportSink for MemorySink {
    fn open_scenario(&mut self, scenario_id: &str) -> Result<(), StorageError> {
        check_id(scenario_id)?;
        self.scenarios.entry(scenario_id.to_string()).or_default();
        Ok(())
    }

    fn append_report(&mut self, record: &MeasurementRecord) -> Result<(), StorageError> {
        if self.fail_next > 0 {
            self.fail_next -= 1;
            return Err(StorageError::SinkUnavailable("injected failure".into()));
        }
        check_id(&record.scenario_id)?;
        let log = self.scenarios.entry(record.scenario_id.clone()).or_default();
        if !log.iter().any(|r| r.key() == record.key()) {
            log.push(record.clone());
        }
        Ok(())
    }

    fn export(&self, scenario_id: &str) -> Result<Vec<MeasurementRecord>, StorageError> {
        self.scenarios
            .get(scenario_id)
            .cloned()
            .map(sorted)
            .ok_or_else(|| StorageError::UnknownScenario(scenario_id.to_string()))
    }
}

/// File-backed append-only log, one file per scenario.
#[derive(Debug)]
pub struct FileSink {
    dir: PathBuf,
    keys: HashMap<String, BTreeSet<(u64, Term)>>,
}

impl FileSink {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            keys: HashMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn log_path(&self, scenario_id: &str) -> PathBuf {
        self.dir.join(format!("{scenario_id}.log"))
    }

    fn read_log(&self, scenario_id: &str) -> Result<Vec<MeasurementRecord>, StorageError> {
        check_id(scenario_id)?;
        let path = self.log_path(scenario_id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StorageError::UnknownScenario(scenario_id.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        let complete = match text.rfind('\n') {
            Some(end) => &text[..=end],
            None => "",
        };
        complete
            .lines()
            .enumerate()
            .map(|(i, line)| {
                serde_json::from_str(line).map_err(|e| StorageError::Corrupt {
                    path: path.clone(),
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
            .collect()
    }

    fn keys_for(&mut self, scenario_id: &str) -> Result<&mut BTreeSet<(u64, Term)>, StorageError> {
        if !self.keys.contains_key(scenario_id) {
            let keys = match self.read_log(scenario_id) {
                Ok(records) => records.iter().map(|r| (r.cycle_index, r.term)).collect(),
                Err(StorageError::UnknownScenario(_)) => BTreeSet::new(),
                Err(e) => return Err(e),
            };
            self.keys.insert(scenario_id.to_string(), keys);
        }
        Ok(self.keys.get_mut(scenario_id).expect("just inserted"))
    }
}

impl ReportSink for FileSink {
    fn open_scenario(&mut self, scenario_id: &str) -> Result<(), StorageError> {
        check_id(scenario_id)?;
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.log_path(scenario_id))?;
        self.keys_for(scenario_id)?;
        Ok(())
    }

    fn append_report(&mut self, record: &MeasurementRecord) -> Result<(), StorageError> {
        check_id(&record.scenario_id)?;
        let key = (record.cycle_index, record.term);
        if self.keys_for(&record.scenario_id)?.contains(&key) {
            return Ok(());
        }
        let mut line = serde_json::to_string(record)
            .map_err(|e| StorageError::SinkUnavailable(e.to_string()))?;
        line.push('\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.log_path(&record.scenario_id))?;
        file.write_all(line.as_bytes())?;
        file.flush()?;
        self.keys_for(&record.scenario_id)?.insert(key);
        Ok(())
    }

    fn export(&self, scenario_id: &str) -> Result<Vec<MeasurementRecord>, StorageError> {
        self.read_log(scenario_id).map(sorted)
    }
}
