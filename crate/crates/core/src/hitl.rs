//! Agent requests and operator decisions.
//!
//! A completion may carry lines of the form `REQUEST: <Kind>: <rationale>`.
//! They are harvested before code extraction, filed as pending requests and
//! decided by an operator through the service. Approved requests carry an
//! operator note (what was actually done), which is injected verbatim into
//! later mutation prompts of the requesting agent's descendants. The LLM's
//! own rationale is never echoed back into a prompt.
//!
//! The queue is stored as events in `hitl/requests.ndjson`: one `filed` line
//! per request and one `decided` line per decision, replayed on open.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Condvar, Mutex};

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, SystemClock};
use crate::model::AgentId;
use crate::ndjson::{self, NdjsonError};

pub const REQUESTS_FILE: &str = "hitl/requests.ndjson";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RequestKind {
    DatasetUpgrade,
    FileHierarchyChange,
    ImportOrDependencyChange,
    NewTrainingScript,
}

impl RequestKind {
    pub const ALL: [RequestKind; 4] = [
        RequestKind::DatasetUpgrade,
        RequestKind::FileHierarchyChange,
        RequestKind::ImportOrDependencyChange,
        RequestKind::NewTrainingScript,
    ];
}

impl fmt::Display for RequestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for RequestKind {
    type Err = String;

    /// Case-insensitive match against the variant names.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestStatus {
    Pending,
    Approved,
    Denied,
}

impl FromStr for RequestStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pending" => Ok(Self::Pending),
            "approved" => Ok(Self::Approved),
            "denied" => Ok(Self::Denied),
            _ => Err(s.to_string()),
        }
    }
}

/// The operator's verdict on a pending request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Approved,
    Denied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitlRequest {
    pub request_id: String,
    pub agent: AgentId,
    pub generation: u32,
    pub kind: RequestKind,
    pub rationale: String,
    pub status: RequestStatus,
    /// What the operator actually did; empty unless approved.
    pub operator_note: String,
    pub decided_at: Option<DateTime<Utc>>,
}

/// A harvested request that has not been filed yet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestDraft {
    pub agent: AgentId,
    pub generation: u32,
    pub kind: RequestKind,
    pub rationale: String,
}

/// Result of scanning a completion for request lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Harvest {
    pub requests: Vec<RequestDraft>,
    /// The completion with every `REQUEST:` line removed.
    pub remaining: String,
}

fn request_line() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*REQUEST:\s*([^:]*?)\s*:\s*(.*?)\s*$").unwrap())
}

fn is_request_line(line: &str) -> bool {
    line.trim_start().starts_with("REQUEST:")
}

/// Extracts `REQUEST: <Kind>: <rationale>` lines from a completion. Lines with
/// an unknown kind or an empty rationale are dropped with a warning; all
/// request lines, valid or not, are stripped from the remaining text.
pub fn harvest_requests(text: &str, agent: AgentId, generation: u32) -> Harvest {
    let mut requests = Vec::new();
    let mut remaining = String::with_capacity(text.len());
    for line in text.split_inclusive('\n') {
        if !is_request_line(line) {
            remaining.push_str(line);
            continue;
        }
        let body = line.trim_end_matches(['\n', '\r']);
        match request_line().captures(body) {
            Some(c) => match c[1].parse::<RequestKind>() {
                Ok(kind) if !c[2].is_empty() => {
                    requests.push(RequestDraft { agent, generation, kind, rationale: c[2].to_string() })
                }
                Ok(_) => log::warn!("agent {agent}: request without rationale ignored"),
                Err(kind) => log::warn!("agent {agent}: request of unknown kind `{kind}` ignored"),
            },
            None => log::warn!("agent {agent}: malformed request line ignored: {body}"),
        }
    }
    Harvest { requests, remaining }
}

#[derive(Debug, thiserror::Error)]
pub enum HitlError {
    #[error("request {0} was already decided")]
    AlreadyDecided(String),
    #[error("unknown request {0}")]
    UnknownRequest(String),
    #[error("approving a request requires an operator note")]
    MissingNote,
    #[error("requests file: {0}")]
    Storage(#[from] NdjsonError),
    #[error("corrupt requests file: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum Event {
    Filed {
        request: HitlRequest,
    },
    Decided {
        request_id: String,
        status: RequestStatus,
        operator_note: String,
        decided_at: DateTime<Utc>,
    },
}

type Key = (u32, AgentId, u32);

#[derive(Default)]
struct State {
    requests: BTreeMap<Key, HitlRequest>,
    by_id: BTreeMap<String, Key>,
    next_seq: BTreeMap<AgentId, u32>,
    proceed: bool,
}

impl State {
    fn insert(&mut self, key: Key, request: HitlRequest) {
        let next = self.next_seq.entry(request.agent).or_insert(0);
        *next = (*next).max(key.2 + 1);
        self.by_id.insert(request.request_id.clone(), key);
        self.requests.insert(key, request);
    }

    fn pending(&self) -> usize {
        self.requests.values().filter(|r| r.status == RequestStatus::Pending).count()
    }
}

fn parse_seq(id: &str) -> Option<u32> {
    id.rsplit_once(".r").and_then(|(_, s)| s.parse().ok())
}

/// How a barrier was left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierOutcome {
    /// Nothing to wait for (or pausing disabled).
    Immediate,
    /// Every pending request was decided.
    Resolved,
    /// The operator released the barrier explicitly.
    Proceeded,
}

/// The persistent request queue. All writes are serialized through one
/// mutex; the coordinator waits on the condition variable at barriers.
pub struct HitlQueue {
    path: PathBuf,
    writer: Mutex<File>,
    state: Mutex<State>,
    changed: Condvar,
    clock: Arc<dyn Clock>,
}

impl fmt::Debug for HitlQueue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HitlQueue").field("path", &self.path).finish_non_exhaustive()
    }
}

impl HitlQueue {
    pub fn open(run_dir: &Path) -> Result<Self, HitlError> {
        Self::open_with_clock(run_dir, Arc::new(SystemClock))
    }

    pub fn open_with_clock(run_dir: &Path, clock: Arc<dyn Clock>) -> Result<Self, HitlError> {
        let path = run_dir.join(REQUESTS_FILE);
        ndjson::repair_tail(&path)?;
        let mut state = State::default();
        for event in ndjson::read_all::<Event>(&path)? {
            match event {
                Event::Filed { request } => {
                    let seq = parse_seq(&request.request_id)
                        .ok_or_else(|| HitlError::Corrupt(format!("bad request id {}", request.request_id)))?;
                    state.insert((request.generation, request.agent, seq), request);
                }
                Event::Decided { request_id, status, operator_note, decided_at } => {
                    let key = *state
                        .by_id
                        .get(&request_id)
                        .ok_or_else(|| HitlError::Corrupt(format!("decision for unknown request {request_id}")))?;
                    let r = state.requests.get_mut(&key).expect("indexed");
                    r.status = status;
                    r.operator_note = operator_note;
                    r.decided_at = Some(decided_at);
                }
            }
        }
        let writer = ndjson::open_append(&path)?;
        Ok(Self { path, writer: Mutex::new(writer), state: Mutex::new(state), changed: Condvar::new(), clock })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Files a harvested request as pending and returns it with its id.
    pub fn file(&self, draft: RequestDraft) -> Result<HitlRequest, HitlError> {
        let mut writer = self.writer.lock().unwrap();
        let mut state = self.state.lock().unwrap();
        let seq = state.next_seq.get(&draft.agent).copied().unwrap_or(0);
        let request = HitlRequest {
            request_id: format!("{}.r{seq:02}", draft.agent),
            agent: draft.agent,
            generation: draft.generation,
            kind: draft.kind,
            rationale: draft.rationale,
            status: RequestStatus::Pending,
            operator_note: String::new(),
            decided_at: None,
        };
        ndjson::append(&mut writer, &Event::Filed { request: request.clone() })?;
        state.insert((request.generation, request.agent, seq), request.clone());
        self.changed.notify_all();
        Ok(request)
    }

    /// Records the operator's decision. A denial discards the note.
    pub fn resolve(&self, request_id: &str, decision: Decision, operator_note: &str) -> Result<HitlRequest, HitlError> {
        let mut writer = self.writer.lock().unwrap();
        let mut state = self.state.lock().unwrap();
        let key = *state.by_id.get(request_id).ok_or_else(|| HitlError::UnknownRequest(request_id.to_string()))?;
        if state.requests[&key].status != RequestStatus::Pending {
            return Err(HitlError::AlreadyDecided(request_id.to_string()));
        }
        let (status, note) = match decision {
            Decision::Approved if operator_note.trim().is_empty() => return Err(HitlError::MissingNote),
            Decision::Approved => (RequestStatus::Approved, operator_note.to_string()),
            Decision::Denied => (RequestStatus::Denied, String::new()),
        };
        let decided_at = self.clock.now();
        ndjson::append(
            &mut writer,
            &Event::Decided { request_id: request_id.to_string(), status, operator_note: note.clone(), decided_at },
        )?;
        let r = state.requests.get_mut(&key).expect("indexed");
        r.status = status;
        r.operator_note = note;
        r.decided_at = Some(decided_at);
        let out = r.clone();
        self.changed.notify_all();
        Ok(out)
    }

    pub fn get(&self, request_id: &str) -> Option<HitlRequest> {
        let state = self.state.lock().unwrap();
        state.by_id.get(request_id).map(|k| state.requests[k].clone())
    }

    /// All requests in filing order, optionally filtered by status.
    pub fn list(&self, status: Option<RequestStatus>) -> Vec<HitlRequest> {
        let state = self.state.lock().unwrap();
        state.requests.values().filter(|r| status.is_none_or(|s| r.status == s)).cloned().collect()
    }

    pub fn pending_count(&self) -> usize {
        self.state.lock().unwrap().pending()
    }

    /// Operator notes of approved requests filed by any agent in `lineage`
    /// from `since_generation` on, oldest first.
    pub fn approved_notices(&self, lineage: &[AgentId], since_generation: u32) -> Vec<String> {
        let state = self.state.lock().unwrap();
        state
            .requests
            .values()
            .filter(|r| {
                r.status == RequestStatus::Approved && r.generation >= since_generation && lineage.contains(&r.agent)
            })
            .map(|r| r.operator_note.clone())
            .collect()
    }

    /// Releases a barrier the coordinator is currently blocked in.
    pub fn proceed(&self) {
        self.state.lock().unwrap().proceed = true;
        self.changed.notify_all();
    }

    /// Generation barrier. With `enabled` and pending requests present,
    /// blocks until none are pending or [`HitlQueue::proceed`] is called.
    /// `on_block` runs once, just before blocking, so callers can publish
    /// the paused state. A proceed issued before the barrier is reached is
    /// discarded.
    pub fn pause_barrier(&self, enabled: bool, on_block: impl FnOnce(usize)) -> BarrierOutcome {
        let pending = {
            let mut state = self.state.lock().unwrap();
            state.proceed = false;
            state.pending()
        };
        if !enabled || pending == 0 {
            return BarrierOutcome::Immediate;
        }
        on_block(pending);
        let mut state = self.state.lock().unwrap();
        loop {
            if state.proceed {
                state.proceed = false;
                return BarrierOutcome::Proceeded;
            }
            if state.pending() == 0 {
                return BarrierOutcome::Resolved;
            }
            state = self.changed.wait(state).unwrap();
        }
    }
}
