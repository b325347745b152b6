//! Domain types shared by every stage of a run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Identity of one population member: generation index plus sequence number
/// within that generation.
///
/// The derived ordering (generation first, then index) is the tie-breaker of
/// last resort everywhere, and it agrees with the lexicographic order of the
/// rendered form because both parts are zero-padded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentId {
    pub generation: u32,
    pub index: u32,
}

impl AgentId {
    pub fn new(generation: u32, index: u32) -> Self {
        Self { generation, index }
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:03}-{:03}", self.generation, self.index)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("malformed agent id `{0}`, expected <generation>-<index>")]
pub struct ParseAgentIdError(String);

impl FromStr for AgentId {
    type Err = ParseAgentIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (g, i) = s.split_once('-').ok_or_else(|| ParseAgentIdError(s.to_string()))?;
        let generation = g.parse().map_err(|_| ParseAgentIdError(s.to_string()))?;
        let index = i.parse().map_err(|_| ParseAgentIdError(s.to_string()))?;
        Ok(Self { generation, index })
    }
}

impl Serialize for AgentId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AgentId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentStatus {
    Fresh,
    Mutated,
    Trained,
    FailedOnce,
    Removed,
    Survivor,
}

/// One population member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: AgentId,
    pub parent: Option<AgentId>,
    pub generation: u32,
    /// Path relative to the sandbox root, e.g. `gen2/agent002-004`.
    pub workdir: PathBuf,
    pub status: AgentStatus,
    pub fitness: Option<FitnessReport>,
}

impl Agent {
    pub fn new(id: AgentId, parent: Option<AgentId>) -> Self {
        Self {
            id,
            parent,
            generation: id.generation,
            workdir: PathBuf::from(format!("gen{}", id.generation)).join(format!("agent{id}")),
            status: AgentStatus::Fresh,
            fitness: None,
        }
    }

    /// `Trained` and `Survivor` both require an error-free report.
    pub fn is_healthy(&self) -> bool {
        self.fitness.as_ref().is_some_and(FitnessReport::is_success)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainingErrorKind {
    Timeout,
    NonzeroExit,
    MissingMetrics,
    MalformedMetrics,
    LaunchFailure,
}

impl fmt::Display for TrainingErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingError {
    pub kind: TrainingErrorKind,
    pub message: String,
    pub log_excerpt: String,
}

/// Standardized benchmark output. Either both metrics are present or the
/// error is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    pub perplexity: Option<f64>,
    pub mfu: Option<f64>,
    pub wall_time_s: f64,
    pub error: Option<TrainingError>,
    pub repair_attempted: bool,
    /// Extra keys the trainee wrote into its metrics file.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl FitnessReport {
    pub fn success(perplexity: f64, mfu: f64, wall_time_s: f64) -> Self {
        Self {
            perplexity: Some(perplexity),
            mfu: Some(mfu),
            wall_time_s,
            error: None,
            repair_attempted: false,
            extra: BTreeMap::new(),
        }
    }

    pub fn failure(error: TrainingError, wall_time_s: f64) -> Self {
        Self {
            perplexity: None,
            mfu: None,
            wall_time_s,
            error: Some(error),
            repair_attempted: false,
            extra: BTreeMap::new(),
        }
    }

    pub fn is_success(&self) -> bool {
        self.error.is_none() && self.perplexity.is_some() && self.mfu.is_some()
    }

    /// Perplexity and MFU of a successful report.
    pub fn metrics(&self) -> Option<(f64, f64)> {
        match (self.error.as_ref(), self.perplexity, self.mfu) {
            (None, Some(p), Some(m)) => Some((p, m)),
            _ => None,
        }
    }
}
