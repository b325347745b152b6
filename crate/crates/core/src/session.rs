//! Opens everything a run needs from a validated config: the sandbox, the
//! backend, the mutation ledger and the request queue.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::config::{BackendKind, RunConfig};
use crate::evolution::monitor::RunMonitor;
use crate::evolution::{Coordinator, EvolutionError, RunReport};
use crate::harness::sandbox::{SandboxError, SandboxRoot};
use crate::hitl::{HitlError, HitlQueue};
use crate::memory::{Ledger, LedgerError};
use crate::mutation::backend::Backend;
use crate::mutation::http::HttpBackend;
use crate::mutation::mock::{MockBackend, RuleTableError};
use crate::service::ServiceState;

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Rules(#[from] RuleTableError),
    #[error("cannot build the backend: {0}")]
    Backend(String),
    #[error("trainee template {0} is not a directory")]
    MissingTemplate(PathBuf),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Hitl(#[from] HitlError),
}

/// The controller's own directory: the configured one, or the directory of
/// the running executable.
pub fn controller_dir(cfg: &RunConfig) -> PathBuf {
    cfg.controller_dir.clone().unwrap_or_else(|| {
        std::env::current_exe()
            .ok()
            .and_then(|p| p.parent().map(Path::to_path_buf))
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

pub fn build_backend(cfg: &RunConfig) -> Result<Box<dyn Backend>, SessionError> {
    Ok(match cfg.backend.kind {
        BackendKind::Mock => match &cfg.backend.rules {
            Some(path) => Box::new(MockBackend::from_file(path)?),
            None => Box::new(MockBackend::new(Vec::new())),
        },
        BackendKind::Http => {
            Box::new(HttpBackend::new(&cfg.backend).map_err(|e| SessionError::Backend(e.to_string()))?)
        }
    })
}

pub struct Session {
    pub cfg: RunConfig,
    pub sandbox: SandboxRoot,
    pub backend: Box<dyn Backend>,
    pub ledger: Arc<Ledger>,
    pub queue: Arc<HitlQueue>,
    pub monitor: Arc<RunMonitor>,
}

impl Session {
    pub fn open(cfg: RunConfig) -> Result<Self, SessionError> {
        let backend = build_backend(&cfg)?;
        Self::with_backend(cfg, backend)
    }

    /// Like [`Session::open`] with a caller-supplied backend.
    pub fn with_backend(cfg: RunConfig, backend: Box<dyn Backend>) -> Result<Self, SessionError> {
        if !cfg.trainee.template.is_dir() {
            return Err(SessionError::MissingTemplate(cfg.trainee.template.clone()));
        }
        let sandbox = SandboxRoot::new(&cfg.run_dir, &controller_dir(&cfg))?;
        let ledger = Arc::new(Ledger::open(sandbox.root())?);
        let queue = Arc::new(HitlQueue::open(sandbox.root())?);
        Ok(Self { cfg, sandbox, backend, ledger, queue, monitor: Arc::new(RunMonitor::new()) })
    }

    pub fn coordinator(&self) -> Coordinator<'_> {
        Coordinator {
            cfg: &self.cfg,
            sandbox: &self.sandbox,
            backend: self.backend.as_ref(),
            ledger: &self.ledger,
            queue: &self.queue,
            monitor: Some(&self.monitor),
        }
    }

    pub fn run(&self) -> Result<RunReport, EvolutionError> {
        self.coordinator().run_experiment()
    }

    pub fn service_state(&self, token: Option<String>) -> ServiceState {
        ServiceState {
            monitor: self.monitor.clone(),
            queue: self.queue.clone(),
            ledger: self.ledger.clone(),
            token,
            memory_context_limit: self.cfg.memory_context_limit,
        }
    }
}
