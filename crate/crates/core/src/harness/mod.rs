//! Training harness: run a trainee in its workdir, read its metrics, and
//! grant one repair attempt after a failure.
//!
//! The trainee contract: run the configured command with the agent workdir
//! as working directory; exit 0 and leave `metrics.json` holding a JSON
//! object with `perplexity` (> 0) and `mfu` (in `[0, 1]`). Anything else is a
//! failure recorded in the returned [`FitnessReport`], never an `Err`.

pub mod sandbox;

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::chunker::{apply_patch, chunk_source, reassemble, Chunk, ChunkKind};
use crate::config::RunConfig;
use crate::memory::RecordDraft;
use crate::model::{Agent, AgentStatus, FitnessReport, TrainingError, TrainingErrorKind};
use crate::mutation::backend::{complete, Purpose, RequestTags};
use crate::mutation::prompt::{build_repair_prompt, chunk_label, RepairFile};
use crate::mutation::{mutable_files, normalize_patch, write_atomic, MutationEnv};

use sandbox::SandboxRoot;

pub const METRICS_FILE: &str = "metrics.json";
pub const LOG_FILE: &str = "logs/train.log";
/// Size of the log tail kept in a failure report.
pub const LOG_EXCERPT_BYTES: u64 = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct TraineeContract {
    /// Container prefix followed by the trainee command.
    pub run_command: Vec<String>,
    pub timeout: Duration,
}

impl TraineeContract {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let mut run_command = cfg.trainee.container_command_prefix.clone();
        run_command.extend(cfg.trainee.command.iter().cloned());
        Self { run_command, timeout: Duration::from_secs_f64(cfg.trainee.timeout_s) }
    }
}

fn failure(kind: TrainingErrorKind, message: impl Into<String>, log_excerpt: String, wall: f64) -> FitnessReport {
    FitnessReport::failure(TrainingError { kind, message: message.into(), log_excerpt }, wall)
}

/// The log written since `offset`, cut to its last [`LOG_EXCERPT_BYTES`].
fn log_excerpt(log: &Path, offset: u64) -> String {
    let Ok(mut f) = File::open(log) else { return String::new() };
    let len = f.metadata().map(|m| m.len()).unwrap_or(0);
    let start = offset.max(len.saturating_sub(LOG_EXCERPT_BYTES));
    let mut buf = Vec::new();
    if f.seek(SeekFrom::Start(start)).is_err() || f.read_to_end(&mut buf).is_err() {
        return String::new();
    }
    let text = String::from_utf8_lossy(&buf);
    // Drop a partial leading character if the cut landed inside one.
    text.trim_start_matches('\u{FFFD}').to_string()
}

fn kill_group(pid: u32) {
    // SAFETY: kill(2) has no memory-safety preconditions; a stale group id
    // yields ESRCH, which is ignored.
    unsafe {
        libc::kill(-(pid as libc::pid_t), libc::SIGKILL);
    }
}

fn describe(status: ExitStatus) -> String {
    use std::os::unix::process::ExitStatusExt;
    match (status.code(), status.signal()) {
        (Some(c), _) => format!("trainee exited with status {c}"),
        (None, Some(s)) => format!("trainee killed by signal {s}"),
        _ => "trainee exited abnormally".to_string(),
    }
}

fn parse_metrics(path: &Path) -> Result<(f64, f64, std::collections::BTreeMap<String, Value>), (TrainingErrorKind, String)> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err((TrainingErrorKind::MissingMetrics, format!("{METRICS_FILE} was not written")))
        }
        Err(e) => return Err((TrainingErrorKind::MalformedMetrics, format!("{METRICS_FILE}: {e}"))),
    };
    let malformed = |m: String| (TrainingErrorKind::MalformedMetrics, m);
    let value: Value = serde_json::from_str(&text).map_err(|e| malformed(format!("{METRICS_FILE}: {e}")))?;
    let Value::Object(mut map) = value else { return Err(malformed(format!("{METRICS_FILE} is not an object"))) };
    let mut number = |key: &str| -> Result<f64, (TrainingErrorKind, String)> {
        map.remove(key)
            .and_then(|v| v.as_f64())
            .filter(|v| v.is_finite())
            .ok_or_else(|| malformed(format!("{METRICS_FILE}: `{key}` missing or not a number")))
    };
    let perplexity = number("perplexity")?;
    let mfu = number("mfu")?;
    if perplexity <= 0.0 {
        return Err(malformed(format!("perplexity {perplexity} is not positive")));
    }
    if !(0.0..=1.0).contains(&mfu) {
        return Err(malformed(format!("mfu {mfu} is outside [0, 1]")));
    }
    Ok((perplexity, mfu, map.into_iter().collect()))
}

/// Runs the trainee of `agent` once and reads its metrics.
pub fn train_and_benchmark(sandbox: &SandboxRoot, agent: &Agent, contract: &TraineeContract) -> FitnessReport {
    let started = Instant::now();
    let elapsed = || started.elapsed().as_secs_f64();
    let prepared = (|| -> Result<(PathBuf, PathBuf, PathBuf), String> {
        let workdir = sandbox.workdir(agent).map_err(|e| e.to_string())?;
        let log = sandbox.guard_path(&workdir.join(LOG_FILE)).map_err(|e| e.to_string())?;
        let metrics = sandbox.guard_path(&workdir.join(METRICS_FILE)).map_err(|e| e.to_string())?;
        fs::create_dir_all(log.parent().expect("log file has a parent")).map_err(|e| e.to_string())?;
        match fs::remove_file(&metrics) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(format!("cannot clear metrics: {e}")),
            _ => {}
        }
        Ok((workdir, log, metrics))
    })();
    let (workdir, log_path, metrics_path) = match prepared {
        Ok(p) => p,
        Err(m) => return failure(TrainingErrorKind::LaunchFailure, m, String::new(), elapsed()),
    };
    let Some((program, args)) = contract.run_command.split_first() else {
        return failure(TrainingErrorKind::LaunchFailure, "empty trainee command", String::new(), elapsed());
    };
    let opened = OpenOptions::new().create(true).append(true).open(&log_path).and_then(|f| {
        let offset = f.metadata()?.len();
        Ok((f.try_clone()?, f, offset))
    });
    let (stdout, stderr, offset) = match opened {
        Ok(o) => o,
        Err(e) => return failure(TrainingErrorKind::LaunchFailure, format!("log file: {e}"), String::new(), elapsed()),
    };
    let spawned = Command::new(program)
        .args(args)
        .current_dir(&workdir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .env("AGENT_ID", agent.id.to_string())
        .env("AGENT_GENERATION", agent.generation.to_string())
        .process_group(0)
        .spawn();
    let mut child = match spawned {
        Ok(c) => c,
        Err(e) => {
            return failure(TrainingErrorKind::LaunchFailure, format!("cannot start {program}: {e}"), String::new(), elapsed())
        }
    };
    let pid = child.id();
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) if started.elapsed() >= contract.timeout => break None,
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                kill_group(pid);
                let _ = child.wait();
                return failure(TrainingErrorKind::LaunchFailure, format!("wait failed: {e}"), String::new(), elapsed());
            }
        }
    };
    // Reap anything the trainee left running, on every path.
    kill_group(pid);
    let wall = elapsed();
    let Some(status) = status else {
        let _ = child.wait();
        let message = format!("trainee exceeded the {:.1} s timeout", contract.timeout.as_secs_f64());
        return failure(TrainingErrorKind::Timeout, message, log_excerpt(&log_path, offset), wall);
    };
    if !status.success() {
        return failure(TrainingErrorKind::NonzeroExit, describe(status), log_excerpt(&log_path, offset), wall);
    }
    match parse_metrics(&metrics_path) {
        Ok((perplexity, mfu, extra)) => {
            let mut report = FitnessReport::success(perplexity, mfu, wall);
            report.extra = extra;
            report
        }
        Err((kind, message)) => failure(kind, message, log_excerpt(&log_path, offset), wall),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RepairError {
    #[error("agent {0} already used its repair attempt")]
    AlreadyFailedOnce(crate::model::AgentId),
    #[error("repair requested for a successful report")]
    NotAFailure,
}

fn chunk_header() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^CHUNK\s+(\S+)\s+(\d+)\s*$").unwrap())
}

/// `(file, index, code)` triples of a repair completion.
pub fn parse_repair_response(text: &str) -> Vec<(String, usize, String)> {
    let mut out = Vec::new();
    let mut lines = text.split_inclusive('\n').peekable();
    while let Some(line) = lines.next() {
        let Some(c) = chunk_header().captures(line.trim_end()) else { continue };
        let (file, index) = (c[1].to_string(), c[2].parse().unwrap_or(usize::MAX));
        // Skip to the opening fence.
        while lines.peek().is_some_and(|l| !l.trim_start().starts_with("```") && !chunk_header().is_match(l.trim_end())) {
            lines.next();
        }
        if !lines.peek().is_some_and(|l| l.trim_start().starts_with("```")) {
            continue;
        }
        lines.next();
        let mut code = String::new();
        for l in lines.by_ref() {
            if l.trim_start().starts_with("```") {
                break;
            }
            code.push_str(l);
        }
        if !code.trim().is_empty() {
            out.push((file, index, code));
        }
    }
    out
}

/// Applies the repair patches for one file; returns the new chunks and the
/// indices actually changed.
fn patch_file(mut chunks: Vec<Chunk>, patches: &[(usize, &str)]) -> (Vec<Chunk>, Vec<usize>) {
    let mut changed = Vec::new();
    for &(index, code) in patches {
        let Some(chunk) = chunks.get(index) else { continue };
        if chunk.kind == ChunkKind::ModuleImports {
            log::info!("repair tried to edit import chunk {index}; ignored");
            continue;
        }
        let new_text = normalize_patch(&chunk.text, code);
        if new_text == chunk.text {
            continue;
        }
        match apply_patch(&chunks, index, &new_text) {
            Ok(p) => {
                chunks = p;
                changed.push(index);
            }
            Err(e) => log::info!("repair patch for chunk {index} rejected: {e}"),
        }
    }
    (chunks, changed)
}

/// Grants `agent` its single repair attempt: the backend sees the failing
/// sources and the log tail, its corrected chunks are applied, and training
/// runs again. The agent moves to `FailedOnce`; the caller decides between
/// `Trained` and `Removed` from the returned report.
pub fn repair_and_retry(
    env: &MutationEnv<'_>,
    agent: &mut Agent,
    report: &FitnessReport,
    contract: &TraineeContract,
) -> Result<FitnessReport, RepairError> {
    if agent.status == AgentStatus::FailedOnce {
        return Err(RepairError::AlreadyFailedOnce(agent.id));
    }
    let error = report.error.as_ref().ok_or(RepairError::NotAFailure)?;
    agent.status = AgentStatus::FailedOnce;
    let unresolved = || FitnessReport { repair_attempted: true, ..report.clone() };

    let workdir = match env.sandbox.workdir(agent) {
        Ok(w) => w,
        Err(_) => return Ok(unresolved()),
    };
    let mut sources: Vec<(PathBuf, PathBuf, Vec<Chunk>)> = Vec::new();
    for rel in mutable_files(&workdir, env.cfg) {
        let Ok(path) = env.sandbox.guard_path(&workdir.join(&rel)) else { continue };
        let Ok(bytes) = fs::read(&path) else { continue };
        if let Ok(chunks) = chunk_source(&bytes, &rel) {
            sources.push((rel, path, chunks));
        }
    }
    let files: Vec<RepairFile<'_>> = sources.iter().map(|(rel, _, c)| RepairFile { path: rel, chunks: c }).collect();
    let tags = RequestTags { purpose: Purpose::Repair, agent: Some(agent.id), generation: Some(agent.generation) };
    let request = build_repair_prompt(error, &files, env.cfg.max_output_tokens, tags);
    let response = match complete(env.backend, &request, &env.retry) {
        Ok(r) => r,
        Err(e) => {
            log::info!("agent {}: repair request failed: {e}", agent.id);
            return Ok(unresolved());
        }
    };
    let patches = parse_repair_response(&response.text);
    let mut tokens = Some((response.prompt_tokens, response.completion_tokens));
    for (rel, path, chunks) in sources {
        let key = rel.to_string_lossy();
        let mine: Vec<(usize, &str)> =
            patches.iter().filter(|(f, _, _)| *f == key).map(|(_, i, c)| (*i, c.as_str())).collect();
        if mine.is_empty() {
            continue;
        }
        let (patched, changed) = patch_file(chunks, &mine);
        if changed.is_empty() {
            continue;
        }
        let written = reassemble(&patched).map_err(std::io::Error::other).and_then(|t| write_atomic(&path, t.as_bytes()));
        if let Err(e) = written {
            log::warn!("agent {}: cannot write repaired {}: {e}", agent.id, rel.display());
            continue;
        }
        for index in changed {
            let chunk = &patched[index];
            // The whole repair completion is accounted to its first record.
            let (prompt_tokens, completion_tokens) = tokens.take().unwrap_or((0, 0));
            let mut metadata = response.backend_metadata.clone();
            metadata.insert("purpose".into(), Value::from("repair"));
            let summary = format!("Repaired {} after a {} failure.", chunk_label(chunk), error.kind);
            let draft = RecordDraft::new(
                agent.id,
                agent.generation,
                rel.clone(),
                chunk.kind,
                chunk.name.clone(),
                summary,
                prompt_tokens,
                completion_tokens,
                metadata,
            );
            if let Err(e) = draft.and_then(|d| env.ledger.append(d)) {
                log::warn!("agent {}: repair record not stored: {e}", agent.id);
            }
        }
    }
    let mut retried = train_and_benchmark(env.sandbox, agent, contract);
    retried.repair_attempted = true;
    Ok(retried)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub instances: usize,
    pub errors: usize,
    pub resolved: usize,
    /// Percentages rounded to two decimals.
    pub error_rate_pct: f64,
    pub resolution_rate_pct: f64,
}

fn pct(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        return 0.0;
    }
    (10_000.0 * part as f64 / whole as f64).round() / 100.0
}

/// Error statistics over the final report of every initial training attempt.
/// A report with `repair_attempted` marks an initial failure; it is resolved
/// when the retry succeeded.
pub fn compute_error_stats<'a>(reports: impl IntoIterator<Item = &'a FitnessReport>) -> ErrorStats {
    let (mut instances, mut errors, mut resolved) = (0, 0, 0);
    for r in reports {
        instances += 1;
        if r.repair_attempted {
            errors += 1;
            if r.is_success() {
                resolved += 1;
            }
        }
    }
    ErrorStats {
        instances,
        errors,
        resolved,
        error_rate_pct: pct(errors, instances),
        resolution_rate_pct: pct(resolved, errors),
    }
}
