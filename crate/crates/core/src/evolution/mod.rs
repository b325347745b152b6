//! The generation loop: refill, pair, mutate, train, repair or remove,
//! select.
//!
//! The coordinator is sequential; the per-agent work (mutation, training,
//! the single repair attempt) fans out to a pool of `worker_count` threads
//! that take offspring in a seeded random order. Results are gathered and
//! sorted by agent id before anything is derived from them, so every
//! persisted artifact is independent of scheduling.
//!
//! Wall-clock measurements are the one non-deterministic output of a run;
//! they live in `timing.json` files next to the deterministic summaries.

pub mod monitor;
pub mod report;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::harness::sandbox::{SandboxError, SandboxRoot};
use crate::harness::{compute_error_stats, repair_and_retry, train_and_benchmark, ErrorStats, TraineeContract};
use crate::hitl::{HitlError, HitlQueue, RequestDraft};
use crate::memory::{Ledger, LedgerError};
use crate::model::{Agent, AgentId, AgentStatus, FitnessReport};
use crate::mutation::backend::{Backend, RetryPolicy};
use crate::mutation::{mutable_files, mutate_file, write_atomic, MutationEnv, SkipReason};
use crate::rng::SeededRng;

use monitor::{RunEvent, RunMonitor, RunPhase};

pub const RUN_REPORT_FILE: &str = "run_report.json";
pub const RUN_TIMING_FILE: &str = "timing.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const AGENTS_FILE: &str = "agents.json";

#[derive(Debug, thiserror::Error)]
pub enum EvolutionError {
    #[error("no survivors left to refill the population")]
    EmptySurvivorSet,
    #[error("run directory {0} already holds a run")]
    RunDirNotEmpty(PathBuf),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Hitl(#[from] HitlError),
    #[error("persisting run state: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-generation statistics over successfully trained agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub generation: u32,
    pub best_ppl: Option<f64>,
    pub mean_ppl: Option<f64>,
    /// Population standard deviation.
    pub std_ppl: Option<f64>,
    pub best_mfu: Option<f64>,
    pub mean_mfu: Option<f64>,
    pub best_agent: Option<AgentId>,
    pub trained: usize,
    /// Initial training failures.
    pub failed: usize,
    /// Initial failures fixed by the repair attempt.
    pub resolved: usize,
    /// Agents that failed twice.
    pub removed: usize,
    /// Agents that never reached training because their mutation pass or
    /// workdir setup failed outright.
    pub mutation_skipped: usize,
    pub survivor_ids: Vec<AgentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTiming {
    pub generation: u32,
    pub wall_time_s: f64,
}

/// A summary joined with its timing, as served and printed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationView {
    #[serde(flatten)]
    pub summary: GenerationSummary,
    pub wall_time_s: Option<f64>,
}

/// One agent as persisted in `gen<g>/agents.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentView {
    pub id: AgentId,
    pub parent: Option<AgentId>,
    pub status: AgentStatus,
    pub fitness: Option<FitnessReport>,
    /// `(file, chunk index)` of every applied mutation.
    pub mutated_chunks: Vec<(PathBuf, usize)>,
    pub skipped_chunks: Vec<(PathBuf, usize, SkipReason)>,
    pub record_ids: Vec<String>,
    /// Why the agent never trained, if it did not.
    pub setup_error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    pub agent: AgentId,
    pub perplexity: f64,
    pub mfu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    /// A partial report published while generations remain.
    Running,
    Completed,
    /// Aborted because a generation left no survivors.
    Extinct,
}

/// The deterministic outcome of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub status: RunStatus,
    pub rng_seed: u64,
    pub population_size: usize,
    pub survivors: usize,
    pub mutation_probability: f64,
    pub memory_enabled: bool,
    pub generations_planned: u32,
    pub generations_completed: u32,
    /// The unmutated template clone of generation 0.
    pub baseline: Option<AgentMetrics>,
    /// Best agent of the whole run (perplexity first).
    pub final_best: Option<AgentMetrics>,
    /// `100 · (baseline − best) / baseline`; positive means lower perplexity.
    pub ppl_reduction_pct: Option<f64>,
    /// `100 · (best − baseline) / baseline` for the best agent's MFU; signed.
    pub mfu_change_pct: Option<f64>,
    pub errors: ErrorStats,
    /// Run-level best perplexity after each generation.
    pub best_ppl_progression: Vec<Option<f64>>,
    pub generations: Vec<GenerationSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub generations: Vec<GenerationTiming>,
    pub mean_generation_time_s: f64,
    pub total_time_s: f64,
}

/// Ranking used for selection and for run-level bests: perplexity
/// ascending, then MFU descending, then agent id.
pub fn fitness_order(a: (&AgentId, f64, f64), b: (&AgentId, f64, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(b.0))
}

fn agent_key(a: &Agent) -> (&AgentId, f64, f64) {
    let (p, m) = a.fitness.as_ref().and_then(FitnessReport::metrics).unwrap_or((f64::INFINITY, f64::NEG_INFINITY));
    (&a.id, p, m)
}

/// Assigns a parent to each of `n` offspring slots, uniformly with
/// replacement.
pub fn refill_population(survivors: &[Agent], n: usize, rng: &mut SeededRng) -> Result<Vec<AgentId>, EvolutionError> {
    if survivors.is_empty() {
        return Err(EvolutionError::EmptySurvivorSet);
    }
    Ok((0..n).map(|_| survivors[rng.index(survivors.len())].id).collect())
}

/// The best `k` healthy agents, marked as survivors.
pub fn select_survivors(pool: &[Agent], k: usize) -> Vec<Agent> {
    let mut ranked: Vec<Agent> = pool.iter().filter(|a| a.is_healthy()).cloned().collect();
    ranked.sort_by(|a, b| fitness_order(agent_key(a), agent_key(b)));
    ranked.truncate(k);
    for a in &mut ranked {
        a.status = AgentStatus::Survivor;
    }
    ranked
}

fn summarize(generation: u32, agents: &[AgentView], survivors: &[Agent]) -> GenerationSummary {
    let metrics: Vec<(AgentId, f64, f64)> = agents
        .iter()
        .filter_map(|a| a.fitness.as_ref().and_then(FitnessReport::metrics).map(|(p, m)| (a.id, p, m)))
        .collect();
    let n = metrics.len() as f64;
    let (mean_ppl, std_ppl, mean_mfu) = if metrics.is_empty() {
        (None, None, None)
    } else {
        let mean = metrics.iter().map(|m| m.1).sum::<f64>() / n;
        let var = metrics.iter().map(|m| (m.1 - mean).powi(2)).sum::<f64>() / n;
        (Some(mean), Some(var.sqrt()), Some(metrics.iter().map(|m| m.2).sum::<f64>() / n))
    };
    let best = metrics.iter().min_by(|a, b| fitness_order((&a.0, a.1, a.2), (&b.0, b.1, b.2)));
    let attempted: Vec<&FitnessReport> = agents.iter().filter_map(|a| a.fitness.as_ref()).collect();
    GenerationSummary {
        generation,
        best_ppl: best.map(|b| b.1),
        mean_ppl,
        std_ppl,
        best_mfu: metrics.iter().map(|m| m.2).max_by(f64::total_cmp),
        mean_mfu,
        best_agent: best.map(|b| b.0),
        trained: metrics.len(),
        failed: attempted.iter().filter(|r| r.repair_attempted).count(),
        resolved: attempted.iter().filter(|r| r.repair_attempted && r.is_success()).count(),
        removed: agents.iter().filter(|a| a.status == AgentStatus::Removed && a.fitness.is_some()).count(),
        mutation_skipped: agents.iter().filter(|a| a.fitness.is_none()).count(),
        survivor_ids: survivors.iter().map(|a| a.id).collect(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_atomic(path, text.as_bytes())
}

struct Job {
    agent: Agent,
    mutate: bool,
    notices: Vec<String>,
}

struct JobResult {
    view: AgentView,
    requests: Vec<RequestDraft>,
}

/// Everything the loop needs. The monitor is optional observability.
pub struct Coordinator<'a> {
    pub cfg: &'a RunConfig,
    pub sandbox: &'a SandboxRoot,
    pub backend: &'a dyn Backend,
    pub ledger: &'a Ledger,
    pub queue: &'a HitlQueue,
    pub monitor: Option<&'a RunMonitor>,
}

/// State carried between generations.
#[derive(Debug, Default)]
pub struct RunState {
    pub survivors: Vec<Agent>,
    pub parents: BTreeMap<AgentId, Option<AgentId>>,
    /// Every agent that trained successfully, across generations.
    pub trained: Vec<Agent>,
    /// Final report of every initial training attempt.
    pub attempts: Vec<FitnessReport>,
    pub summaries: Vec<GenerationSummary>,
    pub timings: Vec<GenerationTiming>,
    pub best_progression: Vec<Option<f64>>,
    pub baseline: Option<AgentMetrics>,
}

impl RunState {
    fn lineage(&self, mut id: Option<AgentId>) -> Vec<AgentId> {
        let mut out = Vec::new();
        while let Some(a) = id {
            out.push(a);
            id = self.parents.get(&a).copied().flatten();
        }
        out
    }

    fn run_best(&self) -> Option<AgentMetrics> {
        self.trained.iter().min_by(|a, b| fitness_order(agent_key(a), agent_key(b))).and_then(|a| {
            a.fitness.as_ref().and_then(FitnessReport::metrics).map(|(perplexity, mfu)| AgentMetrics {
                agent: a.id,
                perplexity,
                mfu,
            })
        })
    }
}

impl Coordinator<'_> {
    fn emit(&self, event: RunEvent) {
        if let Some(m) = self.monitor {
            m.emit(event);
        }
    }

    fn env<'b>(&'b self, notices: &'b [String]) -> MutationEnv<'b> {
        MutationEnv {
            cfg: self.cfg,
            sandbox: self.sandbox,
            backend: self.backend,
            retry: RetryPolicy::from_config(self.cfg),
            ledger: self.ledger,
            approved_notices: notices,
        }
    }

    /// Mutation, training and the repair attempt of one offspring.
    fn process(&self, job: &Job, contract: &TraineeContract) -> JobResult {
        let mut agent = job.agent.clone();
        let mut view = AgentView {
            id: agent.id,
            parent: agent.parent,
            status: agent.status,
            fitness: None,
            mutated_chunks: Vec::new(),
            skipped_chunks: Vec::new(),
            record_ids: Vec::new(),
            setup_error: None,
        };
        let mut requests = Vec::new();
        if job.mutate {
            let env = self.env(&job.notices);
            let mut rng = SeededRng::new(self.cfg.rng_seed).derive_stream(agent.generation, agent.id);
            let files = match self.sandbox.workdir(&agent) {
                Ok(w) => mutable_files(&w, self.cfg),
                Err(e) => {
                    view.setup_error = Some(e.to_string());
                    Vec::new()
                }
            };
            for file in files {
                match mutate_file(&env, &agent, &file, &mut rng) {
                    Ok(o) => {
                        view.mutated_chunks.extend(o.mutated_chunk_indices.iter().map(|&i| (file.clone(), i)));
                        view.skipped_chunks.extend(o.skipped.into_iter().map(|(i, r)| (file.clone(), i, r)));
                        view.record_ids.extend(o.records.into_iter().map(|r| r.record_id));
                        requests.extend(o.requests);
                    }
                    Err(e) => {
                        view.setup_error = Some(format!("mutating {}: {e}", file.display()));
                        break;
                    }
                }
            }
            agent.status = AgentStatus::Mutated;
        }
        if view.setup_error.is_some() {
            agent.status = AgentStatus::Removed;
            view.status = agent.status;
            return JobResult { view, requests };
        }
        let mut report = train_and_benchmark(self.sandbox, &agent, contract);
        if report.error.is_some() {
            let env = self.env(&job.notices);
            report = repair_and_retry(&env, &mut agent, &report, contract)
                .expect("a fresh agent always has its repair attempt left");
        }
        agent.status = if report.is_success() { AgentStatus::Trained } else { AgentStatus::Removed };
        view.status = agent.status;
        view.fitness = Some(report);
        JobResult { view, requests }
    }

    /// Runs generation `g` on top of `state`.
    pub fn run_generation(&self, state: &mut RunState, g: u32) -> Result<GenerationSummary, EvolutionError> {
        let started = Instant::now();
        self.emit(RunEvent::GenerationStarted { generation: g });
        if let Some(m) = self.monitor {
            m.update(|s| {
                s.phase = RunPhase::Running;
                s.current_generation = Some(g);
            });
        }
        let n = self.cfg.population_size;
        let root_rng = SeededRng::new(self.cfg.rng_seed);
        let mut controller = root_rng.controller_stream(g);
        let parents: Vec<Option<AgentId>> = if g == 0 {
            vec![None; n]
        } else {
            refill_population(&state.survivors, n, &mut controller)?.into_iter().map(Some).collect()
        };
        let mut order: Vec<usize> = (0..n).collect();
        controller.shuffle(&mut order);

        let contract = TraineeContract::from_config(self.cfg);
        let mut jobs = Vec::with_capacity(n);
        let mut failed_setup = Vec::new();
        for (i, parent) in parents.iter().enumerate() {
            let agent = Agent::new(AgentId::new(g, i as u32), *parent);
            state.parents.insert(agent.id, *parent);
            let source = match parent {
                Some(p) => self.sandbox.workdir(state.survivors.iter().find(|s| s.id == *p).expect("parent is a survivor"))?,
                None => self.cfg.trainee.template.clone(),
            };
            if let Err(e) = self.sandbox.create_workdir(&agent, &source) {
                log::warn!("agent {}: workdir setup failed: {e}", agent.id);
                failed_setup.push((agent.clone(), e.to_string()));
            }
            let notices = self.queue.approved_notices(&state.lineage(*parent), 0);
            // Generation 0 keeps one unmutated template clone as the baseline.
            jobs.push(Job { agent, mutate: !(g == 0 && i == 0), notices });
        }

        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<JobResult>> = Mutex::new(Vec::with_capacity(n));
        let workers = self.cfg.worker_count.clamp(1, n.max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, AtomicOrdering::SeqCst);
                    if i >= order.len() {
                        break;
                    }
                    let job = &jobs[order[i]];
                    let result = match failed_setup.iter().find(|(a, _)| a.id == job.agent.id) {
                        Some((_, e)) => JobResult {
                            view: AgentView {
                                id: job.agent.id,
                                parent: job.agent.parent,
                                status: AgentStatus::Removed,
                                fitness: None,
                                mutated_chunks: Vec::new(),
                                skipped_chunks: Vec::new(),
                                record_ids: Vec::new(),
                                setup_error: Some(e.clone()),
                            },
                            requests: Vec::new(),
                        },
                        None => self.process(job, &contract),
                    };
                    let fitness = result.view.fitness.as_ref();
                    self.emit(RunEvent::AgentFinished {
                        generation: g,
                        agent: result.view.id,
                        status: result.view.status,
                        perplexity: fitness.and_then(|f| f.perplexity),
                        mfu: fitness.and_then(|f| f.mfu),
                        error: fitness.and_then(|f| f.error.as_ref().map(|e| e.kind)),
                    });
                    results.lock().unwrap().push(result);
                });
            }
        });
        let mut results = results.into_inner().unwrap();
        results.sort_by_key(|r| r.view.id);

        let mut pool = Vec::new();
        for r in &results {
            if let Some(f) = &r.view.fitness {
                state.attempts.push(f.clone());
                if f.is_success() {
                    self.ledger.correlate(r.view.id, g, f)?;
                    let mut a = Agent::new(r.view.id, r.view.parent);
                    a.status = AgentStatus::Trained;
                    a.fitness = Some(f.clone());
                    pool.push(a);
                }
            }
            for draft in &r.requests {
                let request = self.queue.file(draft.clone())?;
                self.emit(RunEvent::RequestFiled { request });
            }
        }
        if g == 0 {
            state.baseline = results
                .first()
                .filter(|r| r.view.id.index == 0)
                .and_then(|r| r.view.fitness.as_ref())
                .and_then(FitnessReport::metrics)
                .map(|(perplexity, mfu)| AgentMetrics { agent: AgentId::new(0, 0), perplexity, mfu });
        }
        let survivors = select_survivors(&pool, self.cfg.survivors);
        let views: Vec<AgentView> = results.into_iter().map(|r| r.view).collect();
        let summary = summarize(g, &views, &survivors);
        state.trained.extend(pool);
        state.survivors = survivors;
        state.best_progression.push(state.run_best().map(|b| b.perplexity));
        let timing = GenerationTiming { generation: g, wall_time_s: started.elapsed().as_secs_f64() };

        let gen_dir = self.sandbox.guard_path(Path::new(&format!("gen{g}")))?;
        write_json(&gen_dir.join(SUMMARY_FILE), &summary)?;
        write_json(&gen_dir.join(AGENTS_FILE), &views)?;
        write_json(&gen_dir.join(RUN_TIMING_FILE), &timing)?;
        let view = GenerationView { summary: summary.clone(), wall_time_s: Some(timing.wall_time_s) };
        if let Some(m) = self.monitor {
            m.update(|s| {
                s.generations.push(view.clone());
                s.agents.insert(g, views.clone());
            });
        }
        self.emit(RunEvent::GenerationCompleted { summary: view });
        state.summaries.push(summary.clone());
        state.timings.push(timing);
        if let Some(m) = self.monitor {
            let partial = self.report(state, RunStatus::Running);
            m.update(|s| s.report = Some(partial));
        }
        Ok(summary)
    }

    fn report(&self, state: &RunState, status: RunStatus) -> RunReport {
        let best = state.run_best();
        let (ppl_reduction_pct, mfu_change_pct) = match (state.baseline, best) {
            (Some(b), Some(x)) => (
                Some(100.0 * (b.perplexity - x.perplexity) / b.perplexity),
                (b.mfu != 0.0).then(|| 100.0 * (x.mfu - b.mfu) / b.mfu),
            ),
            _ => (None, None),
        };
        RunReport {
            status,
            rng_seed: self.cfg.rng_seed,
            population_size: self.cfg.population_size,
            survivors: self.cfg.survivors,
            mutation_probability: self.cfg.mutation_probability,
            memory_enabled: self.cfg.memory_enabled,
            generations_planned: self.cfg.generations,
            generations_completed: state.summaries.len() as u32,
            baseline: state.baseline,
            final_best: best,
            ppl_reduction_pct,
            mfu_change_pct,
            errors: compute_error_stats(&state.attempts),
            best_ppl_progression: state.best_progression.clone(),
            generations: state.summaries.clone(),
        }
    }

    fn persist_report(&self, state: &RunState, report: &RunReport) -> Result<(), EvolutionError> {
        write_json(&self.sandbox.guard_path(Path::new(RUN_REPORT_FILE))?, report)?;
        let total: f64 = state.timings.iter().map(|t| t.wall_time_s).sum();
        let timing = RunTiming {
            generations: state.timings.clone(),
            mean_generation_time_s: if state.timings.is_empty() { 0.0 } else { total / state.timings.len() as f64 },
            total_time_s: total,
        };
        write_json(&self.sandbox.guard_path(Path::new(RUN_TIMING_FILE))?, &timing)?;
        Ok(())
    }

    /// Runs all configured generations. A generation without survivors ends
    /// the run early with status [`RunStatus::Extinct`]; the partial report
    /// is persisted either way.
    pub fn run_experiment(&self) -> Result<RunReport, EvolutionError> {
        let root = self.sandbox.root();
        if root.join("gen0").exists() || root.join(RUN_REPORT_FILE).exists() {
            return Err(EvolutionError::RunDirNotEmpty(root.to_path_buf()));
        }
        write_atomic(&self.sandbox.guard_path(Path::new("config.toml"))?, self.cfg.to_toml().as_bytes())?;
        let mut state = RunState::default();
        let mut status = RunStatus::Completed;
        for g in 0..self.cfg.generations {
            if g > 0 && state.survivors.is_empty() {
                log::error!("generation {} left no survivors; stopping", g - 1);
                status = RunStatus::Extinct;
                break;
            }
            self.run_generation(&mut state, g)?;
            if g + 1 < self.cfg.generations {
                self.barrier(g);
            }
        }
        let report = self.report(&state, status);
        self.persist_report(&state, &report)?;
        let phase = if status == RunStatus::Extinct { RunPhase::Extinct } else { RunPhase::Finished };
        if let Some(m) = self.monitor {
            m.update(|s| {
                s.phase = phase;
                s.report = Some(report.clone());
            });
        }
        self.emit(RunEvent::RunFinished { phase });
        Ok(report)
    }

    fn barrier(&self, g: u32) {
        let outcome = self.queue.pause_barrier(self.cfg.hitl.pause_between_generations, |pending| {
            log::info!("paused after generation {g}: {pending} pending request(s)");
            if let Some(m) = self.monitor {
                m.update(|s| s.phase = RunPhase::Paused);
            }
            self.emit(RunEvent::Paused { generation: g, pending });
        });
        if outcome != crate::hitl::BarrierOutcome::Immediate {
            if let Some(m) = self.monitor {
                m.update(|s| s.phase = RunPhase::Running);
            }
            self.emit(RunEvent::Resumed { generation: g });
        }
    }
}
