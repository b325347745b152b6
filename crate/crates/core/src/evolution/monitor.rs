//! Live run state shared with the HTTP service.
//!
//! The coordinator publishes snapshots at generation barriers and pushes
//! events as agents finish; readers never block the workers.

use std::collections::BTreeMap;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::hitl::HitlRequest;
use crate::model::{AgentId, AgentStatus, TrainingErrorKind};

use super::{AgentView, GenerationView, RunReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPhase {
    Starting,
    Running,
    Paused,
    Finished,
    Extinct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RunEvent {
    GenerationStarted {
        generation: u32,
    },
    AgentFinished {
        generation: u32,
        agent: AgentId,
        status: AgentStatus,
        perplexity: Option<f64>,
        mfu: Option<f64>,
        error: Option<TrainingErrorKind>,
    },
    GenerationCompleted {
        summary: GenerationView,
    },
    RequestFiled {
        request: HitlRequest,
    },
    RequestDecided {
        request: HitlRequest,
    },
    Paused {
        generation: u32,
        pending: usize,
    },
    Resumed {
        generation: u32,
    },
    RunFinished {
        phase: RunPhase,
    },
}

impl RunEvent {
    /// SSE event name.
    pub fn name(&self) -> &'static str {
        match self {
            RunEvent::GenerationStarted { .. } => "generation_started",
            RunEvent::AgentFinished { .. } => "agent_finished",
            RunEvent::GenerationCompleted { .. } => "generation_completed",
            RunEvent::RequestFiled { .. } => "request_filed",
            RunEvent::RequestDecided { .. } => "request_decided",
            RunEvent::Paused { .. } => "paused",
            RunEvent::Resumed { .. } => "resumed",
            RunEvent::RunFinished { .. } => "run_finished",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub phase: RunPhase,
    pub current_generation: Option<u32>,
    pub generations: Vec<GenerationView>,
    pub agents: BTreeMap<u32, Vec<AgentView>>,
    pub report: Option<RunReport>,
}

#[derive(Debug)]
pub struct RunMonitor {
    snapshot: RwLock<RunSnapshot>,
    events: broadcast::Sender<RunEvent>,
}

impl Default for RunMonitor {
    fn default() -> Self {
        Self::new()
    }
}

impl RunMonitor {
    pub fn new() -> Self {
        let (events, _) = broadcast::channel(1024);
        Self {
            snapshot: RwLock::new(RunSnapshot {
                phase: RunPhase::Starting,
                current_generation: None,
                generations: Vec::new(),
                agents: BTreeMap::new(),
                report: None,
            }),
            events,
        }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<RunEvent> {
        self.events.subscribe()
    }

    pub fn emit(&self, event: RunEvent) {
        // No subscribers is fine.
        let _ = self.events.send(event);
    }

    pub fn snapshot(&self) -> RunSnapshot {
        self.snapshot.read().unwrap().clone()
    }

    pub fn update(&self, f: impl FnOnce(&mut RunSnapshot)) {
        f(&mut self.snapshot.write().unwrap());
    }
}
