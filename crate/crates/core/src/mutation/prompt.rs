//! Prompt construction and the delimiter grammar shared with the mock backend.
//!
//! A mutation payload is laid out in a fixed order: file structure, global
//! names, summaries of earlier changes (oldest first), operator-approved
//! notices, then the chunk itself between `<<<CHUNK i Kind name>>>` and
//! `<<<END CHUNK>>>` lines. The chunk text is reproduced verbatim; a newline
//! is inserted before the closing delimiter only when the chunk lacks one.

use std::fmt::Write as _;
use std::path::Path;

use regex::Regex;

use crate::chunker::{Chunk, ChunkKind, FileStructure};
use crate::memory::FitnessCorrelation;
use crate::model::TrainingError;

use super::backend::{estimate_tokens, BackendRequest, Purpose, RequestTags};

pub const CHUNK_CLOSE: &str = "<<<END CHUNK>>>";

/// Present in every system instruction block.
pub const SANDBOX_PROHIBITION: &str = "Never read, write, execute or reference any path outside the agent's own \
working directory, and never touch the directory containing the central control script.";

pub const IMPORT_FREEZE: &str = "Module-level imports are frozen: do not add, remove or change import statements.";

pub const REQUEST_PROTOCOL: &str = "If the improvement you want needs something you cannot do inside this chunk \
(a larger dataset, a change to the file hierarchy, a new import or dependency, a new training script), add one line \
per request outside the code block: `REQUEST: <Kind>: <rationale>` with <Kind> one of DatasetUpgrade, \
FileHierarchyChange, ImportOrDependencyChange, NewTrainingScript. A human operator decides each request.";

pub fn mutation_instructions() -> String {
    format!(
        "You improve one chunk of a Python training program. Rewrite it with performance, code cleanliness, and \
training speed all in mind.\n\
- {IMPORT_FREEZE}\n\
- Keep the chunk's top-level shape: do not add or remove top-level functions or classes and do not move code into \
another chunk.\n\
- {SANDBOX_PROHIBITION}\n\
- Reply with the complete rewritten chunk in a single fenced code block.\n\
- {REQUEST_PROTOCOL}\n"
    )
}

pub fn repair_instructions() -> String {
    format!(
        "A mutated Python training program failed. Fix it so that it trains and writes its metrics again.\n\
- {IMPORT_FREEZE}\n\
- {SANDBOX_PROHIBITION}\n\
- For every chunk you change, reply with a line `CHUNK <file> <index>` followed by one fenced code block holding \
the complete corrected chunk. Omit unchanged chunks.\n"
    )
}

pub fn summary_instructions() -> String {
    "Summarize the change from BEFORE to AFTER in at most 80 words. Reply with the summary only.\n".to_string()
}

/// Where a prior summary came from.
#[derive(Debug, Clone, PartialEq)]
pub enum SummarySource {
    /// The persistent ledger (earlier generations of this file).
    Ledger { generation: u32, fitness: Option<FitnessCorrelation> },
    /// An earlier chunk of the current mutation pass.
    CurrentPass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSummary {
    /// Chunk name, or the kind for unnamed chunks.
    pub chunk: String,
    pub summary: String,
    pub source: SummarySource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    pub structure: FileStructure,
    pub global_names: Vec<String>,
    /// Oldest first; dropped from the front when over budget.
    pub prior_summaries: Vec<PriorSummary>,
    pub approved_notices: Vec<String>,
    /// Budget for the user payload, in estimated tokens.
    pub token_budget: usize,
    pub max_output_tokens: u32,
}

impl PromptContext {
    pub fn new(structure: FileStructure, token_budget: usize, max_output_tokens: u32) -> Self {
        let global_names = structure.global_names.clone();
        Self {
            structure,
            global_names,
            prior_summaries: Vec::new(),
            approved_notices: Vec::new(),
            token_budget,
            max_output_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("chunk alone needs {needed} tokens, budget is {budget}")]
    ChunkAloneExceedsBudget { needed: usize, budget: usize },
    #[error("context without summaries needs {needed} tokens, budget is {budget}")]
    ContextExceedsBudget { needed: usize, budget: usize },
    #[error("import chunks are never mutated")]
    ImportChunk,
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn chunk_label(chunk: &Chunk) -> String {
    chunk.name.clone().unwrap_or_else(|| chunk.kind.to_string())
}

/// Appends `chunk` between delimiters.
pub fn write_fenced_chunk(out: &mut String, index: usize, kind: ChunkKind, name: Option<&str>, text: &str) {
    match name {
        Some(n) => writeln!(out, "<<<CHUNK {index} {kind} {n}>>>").unwrap(),
        None => writeln!(out, "<<<CHUNK {index} {kind}>>>").unwrap(),
    }
    out.push_str(text);
    if !text.ends_with('\n') {
        out.push('\n');
    }
    out.push_str(CHUNK_CLOSE);
    out.push('\n');
}

fn render_payload(file: &Path, chunk: &Chunk, index: usize, ctx: &PromptContext, summaries: &[PriorSummary]) -> String {
    let mut out = String::new();
    writeln!(out, "File: {}\n\nStructure:", file.display()).unwrap();
    for (i, e) in ctx.structure.entries.iter().enumerate() {
        let name = e.name.as_deref().map(|n| format!(" {n}")).unwrap_or_default();
        writeln!(out, "  [{i}] {}{name} ({} lines)", e.kind, e.line_count).unwrap();
    }
    let globals = if ctx.global_names.is_empty() { "(none)".to_string() } else { ctx.global_names.join(", ") };
    writeln!(out, "\nGlobal names: {globals}\n\nPreviously modified chunks (oldest first):").unwrap();
    if summaries.is_empty() {
        out.push_str("(none)\n");
    }
    for s in summaries {
        let origin = match &s.source {
            SummarySource::Ledger { generation, fitness: Some(f) } => {
                format!("generation {generation}, perplexity {:.4}, mfu {:.4}", f.perplexity, f.mfu)
            }
            SummarySource::Ledger { generation, fitness: None } => format!("generation {generation}, not benchmarked"),
            SummarySource::CurrentPass => "this pass".to_string(),
        };
        writeln!(out, "- {} ({origin}): {}", s.chunk, one_line(&s.summary)).unwrap();
    }
    out.push_str("\nOperator-approved changes:\n");
    if ctx.approved_notices.is_empty() {
        out.push_str("(none)\n");
    }
    for n in &ctx.approved_notices {
        writeln!(out, "- {n}").unwrap();
    }
    writeln!(out, "\nRewrite chunk {index}:").unwrap();
    write_fenced_chunk(&mut out, index, chunk.kind, chunk.name.as_deref(), &chunk.text);
    out
}

/// Builds the mutation request for `chunks[index]`, dropping the oldest
/// summaries until the payload fits the budget.
pub fn build_prompt(
    chunk: &Chunk,
    index: usize,
    ctx: &PromptContext,
    tags: RequestTags,
) -> Result<BackendRequest, PromptError> {
    if chunk.kind == ChunkKind::ModuleImports {
        return Err(PromptError::ImportChunk);
    }
    let budget = ctx.token_budget;
    let needed = estimate_tokens(&chunk.text);
    if needed > budget {
        return Err(PromptError::ChunkAloneExceedsBudget { needed, budget });
    }
    let mut first = 0;
    loop {
        let payload = render_payload(&chunk.file, chunk, index, ctx, &ctx.prior_summaries[first..]);
        let needed = estimate_tokens(&payload);
        if needed <= budget {
            return Ok(BackendRequest {
                system_instructions: mutation_instructions(),
                user_payload: payload,
                max_output_tokens: ctx.max_output_tokens,
                tags,
            });
        }
        if first == ctx.prior_summaries.len() {
            return Err(PromptError::ContextExceedsBudget { needed, budget });
        }
        first += 1;
    }
}

pub fn build_summary_prompt(before: &str, after: &str, tags: RequestTags) -> BackendRequest {
    let mut payload = String::new();
    for (tag, text) in [("BEFORE", before), ("AFTER", after)] {
        writeln!(payload, "<<<{tag}>>>").unwrap();
        payload.push_str(text);
        if !text.ends_with('\n') {
            payload.push('\n');
        }
        writeln!(payload, "<<<END {tag}>>>").unwrap();
    }
    BackendRequest {
        system_instructions: summary_instructions(),
        user_payload: payload,
        max_output_tokens: 160,
        tags: RequestTags { purpose: Purpose::Summarize, ..tags },
    }
}

/// The text between `<<<BEFORE>>>` and `<<<END BEFORE>>>` of a summary payload.
pub fn summary_before(payload: &str) -> Option<&str> {
    let start = payload.find("<<<BEFORE>>>\n")? + "<<<BEFORE>>>\n".len();
    let end = payload[start..].find("<<<END BEFORE>>>")? + start;
    Some(&payload[start..end])
}

/// One source file presented to the repair prompt.
#[derive(Debug, Clone)]
pub struct RepairFile<'a> {
    pub path: &'a Path,
    pub chunks: &'a [Chunk],
}

pub fn build_repair_prompt(
    error: &TrainingError,
    files: &[RepairFile<'_>],
    max_output_tokens: u32,
    tags: RequestTags,
) -> BackendRequest {
    let mut out = String::new();
    writeln!(out, "Training failed ({}): {}\n\nLog tail:\n<<<LOG>>>", error.kind, one_line(&error.message)).unwrap();
    out.push_str(&error.log_excerpt);
    if !error.log_excerpt.ends_with('\n') {
        out.push('\n');
    }
    out.push_str("<<<END LOG>>>\n");
    for f in files {
        writeln!(out, "\nFile: {}", f.path.display()).unwrap();
        for (i, c) in f.chunks.iter().enumerate() {
            write_fenced_chunk(&mut out, i, c.kind, c.name.as_deref(), &c.text);
        }
    }
    BackendRequest {
        system_instructions: repair_instructions(),
        user_payload: out,
        max_output_tokens,
        tags: RequestTags { purpose: Purpose::Repair, ..tags },
    }
}

/// A chunk recovered from a payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FencedChunk {
    /// The most recent `File:` header before the chunk, if any.
    pub file: Option<String>,
    pub index: usize,
    pub kind: String,
    pub name: Option<String>,
    pub text: String,
}

/// Parses every delimited chunk out of a mutation or repair payload.
pub fn parse_fenced_chunks(payload: &str) -> Vec<FencedChunk> {
    static OPEN: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let open = OPEN.get_or_init(|| Regex::new(r"^<<<CHUNK (\d+) (\w+)(?: (\S+))?>>>$").unwrap());
    let mut out = Vec::new();
    let mut file = None;
    let mut current: Option<FencedChunk> = None;
    for line in payload.split_inclusive('\n') {
        let bare = line.trim_end_matches('\n');
        if let Some(c) = current.as_mut() {
            if bare == CHUNK_CLOSE {
                out.push(current.take().unwrap());
            } else {
                c.text.push_str(line);
            }
            continue;
        }
        if let Some(f) = bare.strip_prefix("File: ") {
            file = Some(f.to_string());
        } else if let Some(c) = open.captures(bare) {
            current = Some(FencedChunk {
                file: file.clone(),
                index: c[1].parse().unwrap_or(usize::MAX),
                kind: c[2].to_string(),
                name: c.get(3).map(|m| m.as_str().to_string()),
                text: String::new(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::{chunk_str, extract_structure};

    fn tags() -> RequestTags {
        RequestTags { purpose: Purpose::Mutate, agent: None, generation: None }
    }

    fn summary(chunk: &str, text: &str) -> PriorSummary {
        PriorSummary { chunk: chunk.into(), summary: text.into(), source: SummarySource::CurrentPass }
    }

    #[test]
    fn minimal_prompt_has_one_fenced_chunk() {
        let chunks = chunk_str("def f():\n    pass\n", Path::new("a.py"));
        let ctx = PromptContext::new(extract_structure(&chunks), 4096, 256);
        let req = build_prompt(&chunks[0], 0, &ctx, tags()).unwrap();
        let fenced = parse_fenced_chunks(&req.user_payload);
        assert_eq!(fenced.len(), 1);
        assert_eq!(fenced[0].text, "def f():\n    pass\n");
        assert_eq!(fenced[0].name.as_deref(), Some("f"));
        assert!(req.system_instructions.contains(SANDBOX_PROHIBITION));
        assert!(req.system_instructions.contains("performance, code cleanliness, and training speed"));
    }

    #[test]
    fn over_budget_drops_oldest_summary() {
        let chunks = chunk_str("def f():\n    pass\n", Path::new("a.py"));
        let mut ctx = PromptContext::new(extract_structure(&chunks), 0, 256);
        let base = build_prompt(&chunks[0], 0, &PromptContext { token_budget: 4096, ..ctx.clone() }, tags()).unwrap();
        // Each summary line is "- gN (this pass): " + 40 bytes + "\n" = 59 bytes; the
        // "(none)\n" placeholder (7 bytes) disappears once any summary is present.
        let texts = ["a".repeat(40), "b".repeat(40), "c".repeat(40)];
        ctx.prior_summaries = texts.iter().enumerate().map(|(i, t)| summary(&format!("g{i}"), t)).collect();
        let line = "- g0 (this pass): ".len() + 40 + 1;
        let two = base.user_payload.len() - "(none)\n".len() + 2 * line;
        ctx.token_budget = two.div_ceil(4);
        assert!(estimate_tokens(&"x".repeat(two + line)) > ctx.token_budget);
        let req = build_prompt(&chunks[0], 0, &ctx, tags()).unwrap();
        assert!(!req.user_payload.contains(&texts[0]));
        assert!(req.user_payload.contains(&texts[1]));
        assert!(req.user_payload.contains(&texts[2]));
        assert_eq!(req.user_payload.len(), two);
    }

    #[test]
    fn approved_notice_is_verbatim() {
        let chunks = chunk_str("X = 1\n", Path::new("a.py"));
        let mut ctx = PromptContext::new(extract_structure(&chunks), 4096, 256);
        ctx.approved_notices.push("dataset enlarged to X".into());
        let req = build_prompt(&chunks[0], 0, &ctx, tags()).unwrap();
        assert!(req.user_payload.contains("dataset enlarged to X"));
    }

    #[test]
    fn chunk_alone_over_budget() {
        let chunks = chunk_str("def f():\n    return 12345678\n", Path::new("a.py"));
        let ctx = PromptContext::new(extract_structure(&chunks), 3, 256);
        assert!(matches!(
            build_prompt(&chunks[0], 0, &ctx, tags()),
            Err(PromptError::ChunkAloneExceedsBudget { .. })
        ));
        let ctx = PromptContext::new(extract_structure(&chunks), 10, 256);
        assert!(matches!(build_prompt(&chunks[0], 0, &ctx, tags()), Err(PromptError::ContextExceedsBudget { .. })));
    }

    #[test]
    fn section_order_is_fixed() {
        let chunks = chunk_str("import os\n\nX = 1\n\ndef f():\n    return X\n", Path::new("a.py"));
        let mut ctx = PromptContext::new(extract_structure(&chunks), 4096, 256);
        ctx.prior_summaries.push(PriorSummary {
            chunk: "GlobalVars".into(),
            summary: "raised X".into(),
            source: SummarySource::Ledger { generation: 0, fitness: Some(FitnessCorrelation { perplexity: 37.7, mfu: 0.4 }) },
        });
        ctx.approved_notices.push("note".into());
        let p = build_prompt(&chunks[2], 2, &ctx, tags()).unwrap().user_payload;
        let pos = |s: &str| p.find(s).unwrap_or_else(|| panic!("{s} missing from\n{p}"));
        assert!(pos("Structure:") < pos("Global names: X"));
        assert!(pos("Global names: X") < pos("raised X"));
        assert!(pos("perplexity 37.7000") < pos("Operator-approved"));
        assert!(pos("- note") < pos("<<<CHUNK 2 FunctionDef f>>>"));
    }

    #[test]
    fn repair_payload_round_trips_chunks() {
        let a = chunk_str("import os\n\ndef f():\n    return y\n", Path::new("a.py"));
        let b = chunk_str("Z = 2", Path::new("sub/b.py"));
        let err = TrainingError {
            kind: crate::model::TrainingErrorKind::NonzeroExit,
            message: "exit status 1".into(),
            log_excerpt: "NameError: name 'y' is not defined".into(),
        };
        let files = [RepairFile { path: Path::new("a.py"), chunks: &a }, RepairFile { path: Path::new("sub/b.py"), chunks: &b }];
        let req = build_repair_prompt(&err, &files, 512, tags());
        assert_eq!(req.tags.purpose, Purpose::Repair);
        assert!(req.user_payload.contains("NameError"));
        let parsed = parse_fenced_chunks(&req.user_payload);
        assert_eq!(parsed.len(), 3);
        assert_eq!(parsed[1].file.as_deref(), Some("a.py"));
        assert_eq!(parsed[1].text, "def f():\n    return y\n");
        assert_eq!(parsed[2].file.as_deref(), Some("sub/b.py"));
        assert_eq!(parsed[2].text, "Z = 2\n");
    }
}
