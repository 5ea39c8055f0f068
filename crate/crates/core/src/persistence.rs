//! Append-only, hash-chained event log per case, with replay and snapshots.
//!
//! Every log starts with an opening record at seq 0 that carries the case
//! parameters; transitions follow from seq 1. Records are stored as
//! JSON lines in a fixed key order, and each record hash covers the record
//! body plus the previous hash.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kernel::{
    open_case, opening_effects, step, BugCase, CaseParams, Counters, Effect, KernelError,
    LifecycleStage, StageOutcome,
};
use crate::model::{CaseId, Clock, Principal};

/// What a record applies: the case opening or one stage outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RecordedOutcome {
    Stage(StageOutcome),
    Opened { opened: CaseParams },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub seq: u64,
    pub case_id: CaseId,
    pub stage_before: LifecycleStage,
    pub outcome: RecordedOutcome,
    pub effects: Vec<Effect>,
    pub actor: Principal,
    pub counters_after: Counters,
    pub timestamp: u64,
    pub record_hash: String,
}

impl EventRecord {
    pub fn stage_outcome(&self) -> Option<&StageOutcome> {
        match &self.outcome {
            RecordedOutcome::Stage(o) => Some(o),
            RecordedOutcome::Opened { .. } => None,
        }
    }
}

/// The record fields covered by the hash, in log key order.
#[derive(Serialize)]
struct HashedBody<'a> {
    seq: u64,
    case_id: &'a CaseId,
    stage_before: LifecycleStage,
    outcome: &'a RecordedOutcome,
    effects: &'a [Effect],
    actor: &'a Principal,
    counters_after: &'a Counters,
    timestamp: u64,
}

fn record_hash(record: &EventRecord, prev_hash: &str) -> String {
    let body = HashedBody {
        seq: record.seq,
        case_id: &record.case_id,
        stage_before: record.stage_before,
        outcome: &record.outcome,
        effects: &record.effects,
        actor: &record.actor,
        counters_after: &record.counters_after,
        timestamp: record.timestamp,
    };
    let mut hasher = Sha256::new();
    hasher.update(prev_hash.as_bytes());
    hasher.update(b"\n");
    hasher.update(serde_json::to_vec(&body).expect("record body serializes"));
    hex::encode(hasher.finalize())
}

fn to_line(record: &EventRecord) -> String {
    let mut line = serde_json::to_string(record).expect("record serializes");
    line.push('\n');
    line
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub case_id: CaseId,
    pub as_of_seq: u64,
    pub case: BugCase,
    /// Hash of the record at `as_of_seq`, to continue chain checks.
    pub record_hash: String,
}

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("unknown case {0}")]
    UnknownCase(CaseId),
    #[error("case {0} already exists")]
    DuplicateCase(CaseId),
    #[error("stale write: case is at {current} (seq {current_seq}), write expected {expected}")]
    StaleWrite {
        current: LifecycleStage,
        current_seq: u64,
        expected: LifecycleStage,
    },
    #[error("corrupt event log at seq {seq}: {reason}")]
    CorruptChain { seq: u64, reason: String },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl PartialEq for PersistError {
    fn eq(&self, other: &Self) -> bool {
        self.to_string() == other.to_string()
    }
}

fn corrupt(seq: u64, reason: impl Into<String>) -> PersistError {
    PersistError::CorruptChain {
        seq,
        reason: reason.into(),
    }
}

/// Parses and checks a whole log: line framing, canonical encoding, seq
/// order, hash chain and agreement with the kernel. Errors name the first
/// bad position, counting the opening record as seq 0.
pub fn verify_log(bytes: &[u8]) -> Result<(Vec<EventRecord>, BugCase), PersistError> {
    if bytes.is_empty() {
        return Err(corrupt(0, "empty log"));
    }
    let mut records: Vec<EventRecord> = Vec::new();
    let mut case: Option<BugCase> = None;
    let mut rest = bytes;
    let mut position = 0u64;
    while !rest.is_empty() {
        let Some(end) = rest.iter().position(|b| *b == b'\n') else {
            return Err(corrupt(position, "missing line terminator"));
        };
        let raw = &rest[..end];
        rest = &rest[end + 1..];
        let line = std::str::from_utf8(raw).map_err(|_| corrupt(position, "invalid UTF-8"))?;
        let record: EventRecord = serde_json::from_str(line)
            .map_err(|e| corrupt(position, format!("unparseable record: {e}")))?;
        if to_line(&record).as_bytes() != &bytes_with_lf(raw)[..] {
            return Err(corrupt(position, "non-canonical encoding"));
        }
        if record.seq != position {
            return Err(corrupt(position, format!("found seq {}", record.seq)));
        }
        let prev = records.last().map_or("", |r: &EventRecord| r.record_hash.as_str());
        if record_hash(&record, prev) != record.record_hash {
            return Err(corrupt(position, "hash mismatch"));
        }
        let next = match (&case, &record.outcome) {
            (None, RecordedOutcome::Opened { opened }) => {
                let opened_case = open_case(opened.clone()).map_err(|e| corrupt(position, e.to_string()))?;
                let consistent = record.case_id == opened.case_id
                    && record.stage_before == opened_case.stage
                    && record.effects == opening_effects(opened.workflow)
                    && record.counters_after == opened_case.counters;
                if !consistent {
                    return Err(corrupt(position, "opening record disagrees with its parameters"));
                }
                opened_case
            }
            (Some(current), RecordedOutcome::Stage(outcome)) => {
                if record.case_id != current.case_id || record.stage_before != current.stage {
                    return Err(corrupt(position, "record does not continue the case"));
                }
                let (next, effects) = step(current, outcome).map_err(|e| corrupt(position, e.to_string()))?;
                if effects != record.effects || next.counters != record.counters_after {
                    return Err(corrupt(position, "recorded effects disagree with the kernel"));
                }
                next
            }
            _ => return Err(corrupt(position, "opening record out of place")),
        };
        case = Some(next);
        records.push(record);
        position += 1;
    }
    Ok((records, case.expect("at least one record")))
}

fn bytes_with_lf(raw: &[u8]) -> Vec<u8> {
    let mut v = raw.to_vec();
    v.push(b'\n');
    v
}

/// Folds records through the kernel without verifying hashes.
pub fn fold(records: &[EventRecord]) -> Result<BugCase, PersistError> {
    let mut iter = records.iter();
    let mut case = match iter.next().map(|r| &r.outcome) {
        Some(RecordedOutcome::Opened { opened }) => open_case(opened.clone())?,
        _ => return Err(corrupt(0, "log does not start with an opening record")),
    };
    for r in iter {
        let outcome = r
            .stage_outcome()
            .ok_or_else(|| corrupt(r.seq, "opening record out of place"))?;
        case = step(&case, outcome)?.0;
    }
    Ok(case)
}

struct CaseLog {
    records: Vec<EventRecord>,
    case: BugCase,
    file: Option<File>,
}

/// One transition to append. `expected_seq`, when given, must match the
/// last recorded seq; it catches races on self-loops where the stage alone
/// cannot.
#[derive(Debug, Clone)]
pub struct PendingEvent {
    pub stage_before: LifecycleStage,
    pub outcome: StageOutcome,
    pub actor: Principal,
    pub expected_seq: Option<u64>,
}

pub struct EventStore {
    dir: Option<PathBuf>,
    clock: Arc<dyn Clock>,
    cases: RwLock<HashMap<CaseId, Arc<Mutex<CaseLog>>>>,
}

fn file_name(case: &CaseId) -> String {
    let safe = !case.as_str().is_empty()
        && case
            .as_str()
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if safe {
        format!("{case}.jsonl")
    } else {
        format!("x-{}.jsonl", hex::encode(case.as_str()))
    }
}

impl EventStore {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self {
            dir: None,
            clock,
            cases: RwLock::new(HashMap::new()),
        }
    }

    /// File-backed store; existing logs in `dir` are verified and loaded.
    pub fn open_dir(dir: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Self, PersistError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let store = Self {
            dir: Some(dir.clone()),
            clock,
            cases: RwLock::new(HashMap::new()),
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            let bytes = fs::read(&path)?;
            let (records, case) = verify_log(&bytes)?;
            let file = OpenOptions::new().append(true).open(&path)?;
            store.cases.write().insert(
                case.case_id.clone(),
                Arc::new(Mutex::new(CaseLog {
                    records,
                    case,
                    file: Some(file),
                })),
            );
        }
        Ok(store)
    }

    fn log(&self, case: &CaseId) -> Result<Arc<Mutex<CaseLog>>, PersistError> {
        self.cases
            .read()
            .get(case)
            .cloned()
            .ok_or_else(|| PersistError::UnknownCase(case.clone()))
    }

    fn create_file(&self, case: &CaseId) -> Result<Option<File>, PersistError> {
        match &self.dir {
            None => Ok(None),
            Some(dir) => Ok(Some(
                OpenOptions::new()
                    .create_new(true)
                    .append(true)
                    .open(dir.join(file_name(case)))?,
            )),
        }
    }

    fn write_durably(file: &mut Option<File>, line: &str) -> Result<(), PersistError> {
        if let Some(f) = file {
            f.write_all(line.as_bytes())?;
            f.sync_data()?;
        }
        Ok(())
    }

    /// Starts a case log with its opening record.
    pub fn open(&self, params: CaseParams, actor: Principal) -> Result<(EventRecord, BugCase), PersistError> {
        let case = open_case(params.clone())?;
        let mut cases = self.cases.write();
        if cases.contains_key(&case.case_id) {
            return Err(PersistError::DuplicateCase(case.case_id));
        }
        let mut record = EventRecord {
            seq: 0,
            case_id: case.case_id.clone(),
            stage_before: case.stage,
            effects: opening_effects(params.workflow),
            outcome: RecordedOutcome::Opened { opened: params },
            actor,
            counters_after: case.counters,
            timestamp: self.clock.now_millis(),
            record_hash: String::new(),
        };
        record.record_hash = record_hash(&record, "");
        let mut file = self.create_file(&case.case_id)?;
        Self::write_durably(&mut file, &to_line(&record))?;
        cases.insert(
            case.case_id.clone(),
            Arc::new(Mutex::new(CaseLog {
                records: vec![record.clone()],
                case: case.clone(),
                file,
            })),
        );
        Ok((record, case))
    }

    /// Applies `event` through the kernel and appends the resulting record.
    pub fn append(&self, case_id: &CaseId, event: PendingEvent) -> Result<(EventRecord, BugCase), PersistError> {
        let log = self.log(case_id)?;
        let mut log = log.lock();
        let last_seq = log.records.len() as u64 - 1;
        if event.stage_before != log.case.stage || event.expected_seq.is_some_and(|s| s != last_seq) {
            return Err(PersistError::StaleWrite {
                current: log.case.stage,
                current_seq: last_seq,
                expected: event.stage_before,
            });
        }
        let (next, effects) = step(&log.case, &event.outcome)?;
        let prev = log.records.last().expect("opening record").record_hash.clone();
        let mut record = EventRecord {
            seq: last_seq + 1,
            case_id: case_id.clone(),
            stage_before: event.stage_before,
            outcome: RecordedOutcome::Stage(event.outcome),
            effects,
            actor: event.actor,
            counters_after: next.counters,
            timestamp: self.clock.now_millis(),
            record_hash: String::new(),
        };
        record.record_hash = record_hash(&record, &prev);
        Self::write_durably(&mut log.file, &to_line(&record))?;
        log.records.push(record.clone());
        log.case = next.clone();
        Ok((record, next))
    }

    pub fn case_ids(&self) -> Vec<CaseId> {
        let mut ids: Vec<CaseId> = self.cases.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn contains(&self, case: &CaseId) -> bool {
        self.cases.read().contains_key(case)
    }

    /// The live state kept alongside the log.
    pub fn current(&self, case: &CaseId) -> Result<BugCase, PersistError> {
        Ok(self.log(case)?.lock().case.clone())
    }

    pub fn records(&self, case: &CaseId) -> Result<Vec<EventRecord>, PersistError> {
        Ok(self.log(case)?.lock().records.clone())
    }

    pub fn last_record(&self, case: &CaseId) -> Result<EventRecord, PersistError> {
        Ok(self
            .log(case)?
            .lock()
            .records
            .last()
            .cloned()
            .expect("opening record"))
    }

    /// Rebuilds the case from its log, verifying the chain. With `up_to`,
    /// stops after that seq.
    pub fn replay(&self, case: &CaseId, up_to: Option<u64>) -> Result<BugCase, PersistError> {
        let bytes = self.export_log(case)?;
        let (records, full) = verify_log(bytes.as_bytes())?;
        match up_to {
            None => Ok(full),
            Some(seq) => fold(&records[..=(seq as usize).min(records.len() - 1)]),
        }
    }

    pub fn snapshot(&self, case: &CaseId) -> Result<Snapshot, PersistError> {
        let log = self.log(case)?;
        let log = log.lock();
        let last = log.records.last().expect("opening record");
        Ok(Snapshot {
            case_id: case.clone(),
            as_of_seq: last.seq,
            case: log.case.clone(),
            record_hash: last.record_hash.clone(),
        })
    }

    /// Restores from `snapshot` and applies the records after it.
    pub fn replay_from(&self, snapshot: &Snapshot) -> Result<BugCase, PersistError> {
        let records = self.records(&snapshot.case_id)?;
        let anchor = records
            .get(snapshot.as_of_seq as usize)
            .ok_or_else(|| corrupt(snapshot.as_of_seq, "snapshot beyond the log"))?;
        if anchor.record_hash != snapshot.record_hash {
            return Err(corrupt(snapshot.as_of_seq, "snapshot does not match the log"));
        }
        let mut case = snapshot.case.clone();
        for r in &records[snapshot.as_of_seq as usize + 1..] {
            let outcome = r
                .stage_outcome()
                .ok_or_else(|| corrupt(r.seq, "opening record out of place"))?;
            case = step(&case, outcome)?.0;
        }
        Ok(case)
    }

    pub fn export_log(&self, case: &CaseId) -> Result<String, PersistError> {
        let log = self.log(case)?;
        let log = log.lock();
        Ok(log.records.iter().map(to_line).collect())
    }

    /// Verifies and loads a foreign log.
    pub fn import_log(&self, bytes: &[u8]) -> Result<CaseId, PersistError> {
        let (records, case) = verify_log(bytes)?;
        let mut cases = self.cases.write();
        if cases.contains_key(&case.case_id) {
            return Err(PersistError::DuplicateCase(case.case_id));
        }
        let mut file = self.create_file(&case.case_id)?;
        if let Some(f) = &mut file {
            f.write_all(bytes)?;
            f.sync_data()?;
        }
        let id = case.case_id.clone();
        cases.insert(id.clone(), Arc::new(Mutex::new(CaseLog { records, case, file })));
        Ok(id)
    }
}
