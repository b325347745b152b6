//! Persistent mutation memory.
//!
//! Every applied mutation becomes a [`MutationRecord`] appended to
//! `memory/ledger.ndjson`. Once the mutated agent has been benchmarked its
//! records are correlated with the measured fitness. Correlation never
//! rewrites a line: it appends a correction line
//! `{"correlates": <record_id>, "perplexity": .., "mfu": ..}` and readers merge
//! corrections into the records they refer to.
//!
//! Records are ordered by `(generation, agent, creation sequence)`, never by
//! wall-clock time, so prompt context built from the ledger is independent of
//! worker scheduling.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::chunker::ChunkKind;
use crate::clock::{Clock, SystemClock};
use crate::model::{AgentId, FitnessReport};
use crate::ndjson::{self, NdjsonError};

pub const LEDGER_FILE: &str = "memory/ledger.ndjson";

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("storage full")]
    StorageFull,
    #[error("corrupt ledger: {0}")]
    CorruptLedger(String),
    #[error("invalid record: {0}")]
    InvalidRecord(&'static str),
    #[error("cannot correlate a failed training run")]
    FailedFitness,
    #[error("ledger io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<NdjsonError> for LedgerError {
    fn from(e: NdjsonError) -> Self {
        match e {
            NdjsonError::StorageFull => LedgerError::StorageFull,
            NdjsonError::Io(e) => LedgerError::Io(e),
            NdjsonError::Corrupt { line, message } => LedgerError::CorruptLedger(format!("line {line}: {message}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessCorrelation {
    pub perplexity: f64,
    pub mfu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationRecord {
    pub record_id: String,
    pub timestamp: DateTime<Utc>,
    pub agent: AgentId,
    pub generation: u32,
    pub source_path: PathBuf,
    pub chunk_kind: ChunkKind,
    pub chunk_name: Option<String>,
    pub summary: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub backend_metadata: BTreeMap<String, serde_json::Value>,
    pub fitness_correlation: Option<FitnessCorrelation>,
}

/// A record before the ledger assigns its id and timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordDraft {
    pub agent: AgentId,
    pub generation: u32,
    pub source_path: PathBuf,
    pub chunk_kind: ChunkKind,
    pub chunk_name: Option<String>,
    pub summary: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub backend_metadata: BTreeMap<String, serde_json::Value>,
}

impl RecordDraft {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        agent: AgentId,
        generation: u32,
        source_path: impl Into<PathBuf>,
        chunk_kind: ChunkKind,
        chunk_name: Option<String>,
        summary: impl Into<String>,
        prompt_tokens: u64,
        completion_tokens: u64,
        backend_metadata: BTreeMap<String, serde_json::Value>,
    ) -> Result<Self, LedgerError> {
        let draft = Self {
            agent,
            generation,
            source_path: source_path.into(),
            chunk_kind,
            chunk_name,
            summary: summary.into(),
            prompt_tokens,
            completion_tokens,
            backend_metadata,
        };
        draft.validate()?;
        Ok(draft)
    }

    fn validate(&self) -> Result<(), LedgerError> {
        if self.summary.trim().is_empty() {
            return Err(LedgerError::InvalidRecord("summary is empty"));
        }
        if self.source_path.as_os_str().is_empty() {
            return Err(LedgerError::InvalidRecord("source_path is empty"));
        }
        if self.source_path.is_absolute() {
            return Err(LedgerError::InvalidRecord("source_path must be relative to the agent workdir"));
        }
        if self.backend_metadata.is_empty() {
            return Err(LedgerError::InvalidRecord("backend_metadata is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Line {
    Correction { correlates: String, perplexity: f64, mfu: f64 },
    Record(MutationRecord),
}

type Key = (u32, AgentId, u32);

#[derive(Default)]
struct Index {
    records: BTreeMap<Key, MutationRecord>,
    by_id: HashMap<String, Key>,
    next_seq: HashMap<AgentId, u32>,
}

impl Index {
    fn insert(&mut self, key: Key, record: MutationRecord) {
        let next = self.next_seq.entry(record.agent).or_insert(0);
        *next = (*next).max(key.2 + 1);
        self.by_id.insert(record.record_id.clone(), key);
        self.records.insert(key, record);
    }
}

fn parse_seq(record_id: &str) -> Option<u32> {
    record_id.rsplit_once('#').and_then(|(_, s)| s.parse().ok())
}

/// One entry of prompt context drawn from the ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub generation: u32,
    pub agent: AgentId,
    pub chunk_name: Option<String>,
    pub summary: String,
    pub fitness_correlation: Option<FitnessCorrelation>,
}

/// The append-only ledger. Appends are serialized through one writer; reads
/// go to the in-memory index rebuilt on open.
pub struct Ledger {
    path: PathBuf,
    writer: Mutex<File>,
    index: RwLock<Index>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Ledger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ledger").field("path", &self.path).finish_non_exhaustive()
    }
}

impl Ledger {
    /// Opens (or creates) the ledger of the run rooted at `run_dir`.
    pub fn open(run_dir: &Path) -> Result<Self, LedgerError> {
        Self::open_with_clock(run_dir, Arc::new(SystemClock))
    }

    pub fn open_with_clock(run_dir: &Path, clock: Arc<dyn Clock>) -> Result<Self, LedgerError> {
        let path = run_dir.join(LEDGER_FILE);
        ndjson::repair_tail(&path)?;
        let lines: Vec<Line> = ndjson::read_all(&path)?;
        let mut index = Index::default();
        let mut corrections = Vec::new();
        for line in lines {
            match line {
                Line::Record(r) => {
                    let seq = parse_seq(&r.record_id)
                        .ok_or_else(|| LedgerError::CorruptLedger(format!("bad record id {}", r.record_id)))?;
                    let key = (r.generation, r.agent, seq);
                    if index.by_id.contains_key(&r.record_id) {
                        return Err(LedgerError::CorruptLedger(format!("duplicate record id {}", r.record_id)));
                    }
                    index.insert(key, r);
                }
                Line::Correction { correlates, perplexity, mfu } => corrections.push((correlates, perplexity, mfu)),
            }
        }
        for (id, perplexity, mfu) in corrections {
            let key = *index
                .by_id
                .get(&id)
                .ok_or_else(|| LedgerError::CorruptLedger(format!("correction for unknown record {id}")))?;
            if let Some(r) = index.records.get_mut(&key) {
                r.fitness_correlation = Some(FitnessCorrelation { perplexity, mfu });
            }
        }
        let writer = ndjson::open_append(&path)?;
        Ok(Self { path, writer: Mutex::new(writer), index: RwLock::new(index), clock })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Durably appends a record and returns its id.
    pub fn append(&self, draft: RecordDraft) -> Result<String, LedgerError> {
        self.append_record(draft).map(|r| r.record_id)
    }

    /// Like [`Ledger::append`], returning the stored record.
    pub fn append_record(&self, draft: RecordDraft) -> Result<MutationRecord, LedgerError> {
        draft.validate()?;
        let mut writer = self.writer.lock().unwrap();
        let seq = *self.index.read().unwrap().next_seq.get(&draft.agent).unwrap_or(&0);
        let record = MutationRecord {
            record_id: format!("{}#{seq:04}", draft.agent),
            timestamp: self.clock.now(),
            agent: draft.agent,
            generation: draft.generation,
            source_path: draft.source_path,
            chunk_kind: draft.chunk_kind,
            chunk_name: draft.chunk_name,
            summary: draft.summary,
            prompt_tokens: draft.prompt_tokens,
            completion_tokens: draft.completion_tokens,
            backend_metadata: draft.backend_metadata,
            fitness_correlation: None,
        };
        ndjson::append(&mut writer, &Line::Record(record.clone()))?;
        self.index.write().unwrap().insert((record.generation, record.agent, seq), record.clone());
        Ok(record)
    }

    /// Attaches benchmark results to every record of `(agent, generation)`.
    /// Returns how many records were updated; zero is not an error.
    pub fn correlate(&self, agent: AgentId, generation: u32, fitness: &FitnessReport) -> Result<usize, LedgerError> {
        let (perplexity, mfu) = fitness.metrics().ok_or(LedgerError::FailedFitness)?;
        let mut writer = self.writer.lock().unwrap();
        let ids: Vec<String> = self
            .index
            .read()
            .unwrap()
            .records
            .range((generation, agent, 0)..=(generation, agent, u32::MAX))
            .map(|(_, r)| r.record_id.clone())
            .collect();
        if ids.is_empty() {
            log::debug!("no ledger records for agent {agent} in generation {generation}");
        }
        for id in &ids {
            ndjson::append(&mut writer, &Line::Correction { correlates: id.clone(), perplexity, mfu })?;
            let mut index = self.index.write().unwrap();
            let key = index.by_id[id];
            if let Some(r) = index.records.get_mut(&key) {
                r.fitness_correlation = Some(FitnessCorrelation { perplexity, mfu });
            }
        }
        Ok(ids.len())
    }

    /// The `limit` most recent records for `source_path`, newest last.
    pub fn query_context(&self, source_path: &Path, limit: usize) -> Vec<ContextEntry> {
        self.query_context_before(source_path, limit, u32::MAX)
    }

    /// Like [`Ledger::query_context`], restricted to generations strictly
    /// before `generation`.
    pub fn query_context_before(&self, source_path: &Path, limit: usize, generation: u32) -> Vec<ContextEntry> {
        let index = self.index.read().unwrap();
        let mut out: Vec<ContextEntry> = index
            .records
            .values()
            .rev()
            .filter(|r| r.generation < generation && r.source_path == source_path)
            .take(limit)
            .map(|r| ContextEntry {
                generation: r.generation,
                agent: r.agent,
                chunk_name: r.chunk_name.clone(),
                summary: r.summary.clone(),
                fitness_correlation: r.fitness_correlation,
            })
            .collect();
        out.reverse();
        out
    }

    /// All records in ledger order.
    pub fn records(&self) -> Vec<MutationRecord> {
        self.index.read().unwrap().records.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
