//! The mutation operator: choose chunks, prompt the backend, apply patches.
//!
//! Chunks of one file are mutated sequentially so that each prompt can
//! carry summaries of the changes already made in the same pass; files are
//! visited in lexicographic order. Any per-chunk failure leaves the chunk's
//! original text in place and is reported as a skip.

pub mod backend;
pub mod http;
pub mod mock;
pub mod prompt;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use walkdir::WalkDir;

use crate::chunker::{self, apply_patch, chunk_source, extract_structure, Chunk, ChunkError, ChunkKind};
use crate::config::RunConfig;
use crate::harness::sandbox::{SandboxError, SandboxRoot};
use crate::hitl::{harvest_requests, RequestDraft};
use crate::memory::{Ledger, LedgerError, MutationRecord, RecordDraft};
use crate::model::Agent;
use crate::rng::SeededRng;

use backend::{complete, Backend, Purpose, RequestTags, RetryPolicy};
use prompt::{build_prompt, build_summary_prompt, chunk_label, PriorSummary, PromptContext, PromptError, SummarySource};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("response contains no code")]
pub struct EmptyCode;

/// The first fenced block of `text` if there is one, else the whole trimmed
/// text.
pub fn extract_code(text: &str) -> Result<String, EmptyCode> {
    let mut lines = text.split_inclusive('\n');
    let mut block: Option<String> = None;
    for line in lines.by_ref() {
        if line.trim_start().starts_with("```") {
            block = Some(String::new());
            break;
        }
    }
    let code = match block {
        Some(mut body) => {
            for line in lines {
                if line.trim_start().starts_with("```") {
                    break;
                }
                body.push_str(line);
            }
            body
        }
        None => text.trim().to_string(),
    };
    if code.trim().is_empty() {
        return Err(EmptyCode);
    }
    Ok(code)
}

/// Fits extracted code into the slot of `original`: the original's leading
/// blank lines and trailing whitespace are kept, so the boundaries between
/// chunks do not drift when a model trims or pads its answer.
pub fn normalize_patch(original: &str, code: &str) -> String {
    let lead: usize = original.split_inclusive('\n').take_while(|l| l.trim().is_empty()).map(str::len).sum();
    let lead = &original[..lead.min(original.len())];
    let trailing = &original[original.trim_end().len().max(lead.len())..];
    let body_start: usize = code.split_inclusive('\n').take_while(|l| l.trim().is_empty()).map(str::len).sum();
    let body = code[body_start.min(code.len())..].trim_end();
    format!("{lead}{body}{trailing}")
}

/// One Bernoulli(`p`) draw per chunk, in order. Import chunks consume their
/// draw but are never selected.
pub fn select_chunks(chunks: &[Chunk], p: f64, rng: &mut SeededRng) -> Vec<usize> {
    chunks
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let hit = rng.bernoulli(p);
            (hit && c.kind != ChunkKind::ModuleImports).then_some(i)
        })
        .collect()
}

/// Why a selected chunk was left unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum SkipReason {
    ImportChunkFrozen,
    StructureBroken(String),
    EmptyCode,
    NoChange,
    Prompt(String),
    Backend(String),
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipReason::ImportChunkFrozen => f.write_str("import chunks are frozen"),
            SkipReason::StructureBroken(m) => write!(f, "structure broken: {m}"),
            SkipReason::EmptyCode => f.write_str("response contained no code"),
            SkipReason::NoChange => f.write_str("response did not change the chunk"),
            SkipReason::Prompt(m) => write!(f, "prompt: {m}"),
            SkipReason::Backend(m) => write!(f, "backend: {m}"),
        }
    }
}

impl From<ChunkError> for SkipReason {
    fn from(e: ChunkError) -> Self {
        match e {
            ChunkError::ImportChunkFrozen => SkipReason::ImportChunkFrozen,
            other => SkipReason::StructureBroken(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MutationOutcome {
    pub agent: crate::model::AgentId,
    pub file: PathBuf,
    pub mutated_chunk_indices: Vec<usize>,
    pub records: Vec<MutationRecord>,
    pub skipped: Vec<(usize, SkipReason)>,
    /// Requests harvested from the completions, not yet filed.
    pub requests: Vec<RequestDraft>,
}

#[derive(Debug, thiserror::Error)]
pub enum MutationError {
    #[error("file outside the agent workdir: {0}")]
    FileOutsideSandbox(PathBuf),
    #[error("file is excluded from mutation: {0}")]
    ExcludedFile(PathBuf),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("mutation io: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything a mutation pass needs besides the agent and its stream.
#[derive(Clone, Copy)]
pub struct MutationEnv<'a> {
    pub cfg: &'a RunConfig,
    pub sandbox: &'a SandboxRoot,
    pub backend: &'a dyn Backend,
    pub retry: RetryPolicy,
    pub ledger: &'a Ledger,
    pub approved_notices: &'a [String],
}

impl RetryPolicy {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            max_retries: cfg.backend.max_retries,
            base_backoff: std::time::Duration::from_millis(cfg.backend.backoff_ms),
        }
    }
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// Mutable `.py` files of a workdir, relative and sorted.
pub fn mutable_files(workdir: &Path, cfg: &RunConfig) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = WalkDir::new(workdir)
        .follow_links(false)
        .into_iter()
        .filter_entry(|e| !matches!(e.file_name().to_str(), Some("logs" | "checkpoints" | "__pycache__")))
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "py"))
        .filter_map(|e| e.path().strip_prefix(workdir).ok().map(Path::to_path_buf))
        .filter(|rel| !cfg.is_excluded(rel))
        .collect();
    out.sort();
    out
}

fn resolve_file(env: &MutationEnv<'_>, agent: &Agent, file: &Path) -> Result<PathBuf, MutationError> {
    if env.cfg.is_excluded(file) {
        return Err(MutationError::ExcludedFile(file.to_path_buf()));
    }
    let workdir = env.sandbox.workdir(agent)?;
    let path = env.sandbox.guard_path(&workdir.join(file)).map_err(|e| match e {
        SandboxError::PathEscape(_) | SandboxError::ControllerDirForbidden(_) => {
            MutationError::FileOutsideSandbox(file.to_path_buf())
        }
        other => MutationError::Sandbox(other),
    })?;
    if !path.starts_with(&workdir) || path == workdir {
        return Err(MutationError::FileOutsideSandbox(file.to_path_buf()));
    }
    Ok(path)
}

/// One mutation pass over `file` (relative to the agent's workdir).
pub fn mutate_file(
    env: &MutationEnv<'_>,
    agent: &Agent,
    file: &Path,
    rng: &mut SeededRng,
) -> Result<MutationOutcome, MutationError> {
    let path = resolve_file(env, agent, file)?;
    let original = std::fs::read(&path)?;
    let mut chunks = chunk_source(&original, file)?;
    let selected = select_chunks(&chunks, env.cfg.mutation_probability, rng);
    let mut outcome = MutationOutcome {
        agent: agent.id,
        file: file.to_path_buf(),
        mutated_chunk_indices: Vec::new(),
        records: Vec::new(),
        skipped: Vec::new(),
        requests: Vec::new(),
    };
    if selected.is_empty() {
        return Ok(outcome);
    }
    let mut summaries: Vec<PriorSummary> = if env.cfg.memory_enabled {
        env.ledger
            .query_context_before(file, env.cfg.memory_context_limit, agent.generation)
            .into_iter()
            .map(|e| PriorSummary {
                chunk: e.chunk_name.unwrap_or_else(|| "GlobalVars".to_string()),
                summary: e.summary,
                source: SummarySource::Ledger { generation: e.generation, fitness: e.fitness_correlation },
            })
            .collect()
    } else {
        Vec::new()
    };
    let tags = RequestTags { purpose: Purpose::Mutate, agent: Some(agent.id), generation: Some(agent.generation) };

    for index in selected {
        let chunk = chunks[index].clone();
        let mut ctx = PromptContext::new(extract_structure(&chunks), env.cfg.token_budget, env.cfg.max_output_tokens);
        ctx.prior_summaries = summaries.clone();
        ctx.approved_notices = env.approved_notices.to_vec();
        let request = match build_prompt(&chunk, index, &ctx, tags) {
            Ok(r) => r,
            Err(PromptError::ImportChunk) => {
                outcome.skipped.push((index, SkipReason::ImportChunkFrozen));
                continue;
            }
            Err(e) => {
                outcome.skipped.push((index, SkipReason::Prompt(e.to_string())));
                continue;
            }
        };
        let response = match complete(env.backend, &request, &env.retry) {
            Ok(r) => r,
            Err(e) => {
                log::info!("agent {}: chunk {index} of {} skipped: {e}", agent.id, file.display());
                outcome.skipped.push((index, SkipReason::Backend(e.to_string())));
                continue;
            }
        };
        let harvest = harvest_requests(&response.text, agent.id, agent.generation);
        outcome.requests.extend(harvest.requests);
        let code = match extract_code(&harvest.remaining) {
            Ok(c) => c,
            Err(EmptyCode) => {
                outcome.skipped.push((index, SkipReason::EmptyCode));
                continue;
            }
        };
        let new_text = normalize_patch(&chunk.text, &code);
        if new_text == chunk.text {
            outcome.skipped.push((index, SkipReason::NoChange));
            continue;
        }
        let patched = match apply_patch(&chunks, index, &new_text) {
            Ok(p) => p,
            Err(e) => {
                outcome.skipped.push((index, e.into()));
                continue;
            }
        };
        let (summary, summary_tokens) = summarize(env, &chunk, &new_text, tags);
        let mut metadata = response.backend_metadata.clone();
        metadata.insert("purpose".into(), Value::from("mutate"));
        let draft = RecordDraft::new(
            agent.id,
            agent.generation,
            file,
            chunk.kind,
            chunk.name.clone(),
            summary.clone(),
            response.prompt_tokens + summary_tokens.0,
            response.completion_tokens + summary_tokens.1,
            metadata,
        )?;
        outcome.records.push(env.ledger.append_record(draft)?);
        outcome.mutated_chunk_indices.push(index);
        if env.cfg.memory_enabled {
            summaries.push(PriorSummary { chunk: chunk_label(&chunk), summary, source: SummarySource::CurrentPass });
        }
        chunks = patched;
    }
    if !outcome.mutated_chunk_indices.is_empty() {
        write_atomic(&path, chunker::reassemble(&chunks)?.as_bytes())?;
    }
    Ok(outcome)
}

/// Asks the backend for a change summary; falls back to a generic one.
fn summarize(env: &MutationEnv<'_>, before: &Chunk, after: &str, tags: RequestTags) -> (String, (u64, u64)) {
    let request = build_summary_prompt(&before.text, after, tags);
    match complete(env.backend, &request, &env.retry) {
        Ok(r) => {
            let text = r.text.trim().to_string();
            (text, (r.prompt_tokens, r.completion_tokens))
        }
        Err(e) => {
            log::info!("summary request failed: {e}");
            let fallback = format!("Rewrote {} ({} -> {} bytes).", chunk_label(before), before.text.len(), after.len());
            (fallback, (0, 0))
        }
    }
}
