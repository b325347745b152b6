//! Structural chunking of Python-syntax source files.
//!
//! The chunker is a line scanner, not a parser. It tracks just enough lexical
//! state (string literals, bracket depth, backslash continuations) to find
//! logical line boundaries, then classifies top-level logical lines with
//! regular expressions:
//!
//! * `import ...` / `from ... import ...` runs become [`ChunkKind::ModuleImports`],
//! * `class Name` plus its indented block becomes [`ChunkKind::ClassDef`],
//! * `def name` / `async def name` (decorators included) plus its block
//!   becomes [`ChunkKind::FunctionDef`],
//! * everything else becomes [`ChunkKind::GlobalVars`].
//!
//! Every byte of the input belongs to exactly one chunk, so concatenating the
//! chunk texts reproduces the file. Broken input (an unclosed bracket, say)
//! still chunks; it just produces fewer, larger chunks.
//!
//! Blank and comment lines between statements are assigned as follows: after
//! a class or function they go to the following chunk; after imports or
//! globals, leading blank lines stay with the preceding chunk and everything
//! from the first comment line on goes to the following chunk. A run at the
//! end of the file stays with the last chunk.

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ChunkError {
    #[error("source is not valid UTF-8 (at byte {0})")]
    InvalidEncoding(usize),
    #[error("chunk spans are not contiguous at chunk {0}")]
    NonContiguousSpans(usize),
    #[error("chunks come from more than one file")]
    MixedFiles,
    #[error("module import chunks are frozen")]
    ImportChunkFrozen,
    #[error("patch changes the top-level structure: {0}")]
    StructureBroken(String),
    #[error("chunk index {index} out of range ({len} chunks)")]
    IndexOutOfRange { index: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChunkKind {
    ModuleImports,
    GlobalVars,
    ClassDef,
    FunctionDef,
}

impl ChunkKind {
    pub fn is_named(self) -> bool {
        matches!(self, ChunkKind::ClassDef | ChunkKind::FunctionDef)
    }
}

impl std::fmt::Display for ChunkKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub kind: ChunkKind,
    pub name: Option<String>,
    pub file: PathBuf,
    pub byte_span: Range<usize>,
    pub text: String,
}

impl Chunk {
    pub fn line_count(&self) -> usize {
        line_count(&self.text)
    }
}

fn line_count(text: &str) -> usize {
    let newlines = text.bytes().filter(|&b| b == b'\n').count();
    if !text.is_empty() && !text.ends_with('\n') {
        newlines + 1
    } else {
        newlines
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureEntry {
    pub kind: ChunkKind,
    pub name: Option<String>,
    pub line_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileStructure {
    pub file: PathBuf,
    pub entries: Vec<StructureEntry>,
    pub global_names: Vec<String>,
}

static DEF_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?:async[ \t]+)?def[ \t]+([^\W\d]\w*)").unwrap());
static CLASS_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^class[ \t]+([^\W\d]\w*)").unwrap());
static IMPORT_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?:import[ \t]|from[ \t]+[\w.]+[ \t]+import\b)").unwrap());
static GLOBAL_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^([^\W\d]\w*)[ \t]*(?::[^=\n]*)?=(?:[^=]|$)").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LineClass {
    Blank,
    Comment,
    /// Code whose first physical line is indented.
    Indented,
    Import,
    Decorator,
    Def,
    Class,
    Other,
}

#[derive(Debug)]
struct LogicalLine {
    bytes: Range<usize>,
    class: LineClass,
    name: Option<String>,
}

#[derive(Default)]
struct LexState {
    /// Open string literal: quote byte and whether it is triple-quoted.
    string: Option<(u8, bool)>,
    depth: i32,
}

impl LexState {
    /// Advances over one physical line; returns true when the logical line
    /// continues onto the next physical line.
    fn scan(&mut self, line: &[u8]) -> bool {
        let mut i = 0;
        let mut in_comment = false;
        while i < line.len() {
            let c = line[i];
            if let Some((q, triple)) = self.string {
                if c == b'\\' {
                    i += 2;
                    continue;
                }
                if triple {
                    if line[i..].starts_with(&[q, q, q]) {
                        self.string = None;
                        i += 3;
                        continue;
                    }
                } else if c == q {
                    self.string = None;
                } else if c == b'\n' {
                    // Unterminated single-quoted literal: end it with the line.
                    self.string = None;
                }
                i += 1;
                continue;
            }
            match c {
                b'#' => {
                    in_comment = true;
                    break;
                }
                b'"' | b'\'' => {
                    if line[i..].starts_with(&[c, c, c]) {
                        self.string = Some((c, true));
                        i += 3;
                        continue;
                    }
                    self.string = Some((c, false));
                }
                b'(' | b'[' | b'{' => self.depth += 1,
                b')' | b']' | b'}' => self.depth = (self.depth - 1).max(0),
                _ => {}
            }
            i += 1;
        }
        if let Some((_, false)) = self.string {
            // A single-quoted literal only survives the line end through an
            // escaped newline, which the `\\` skip above already consumed.
            if !line.ends_with(b"\\\n") && !line.ends_with(b"\\\r\n") {
                self.string = None;
            }
        }
        let trimmed = trim_newline(line);
        let backslash = !in_comment && self.string.is_none() && trimmed.ends_with(b"\\");
        self.string.is_some() || self.depth > 0 || backslash
    }
}

fn trim_newline(line: &[u8]) -> &[u8] {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    line.strip_suffix(b"\r").unwrap_or(line)
}

fn physical_lines(text: &str) -> impl Iterator<Item = Range<usize>> + '_ {
    let bytes = text.as_bytes();
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= bytes.len() {
            return None;
        }
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map_or(bytes.len(), |p| start + p + 1);
        let r = start..end;
        start = end;
        Some(r)
    })
}

fn classify(first_line: &str) -> (LineClass, Option<String>) {
    let content = first_line.trim_end_matches(['\n', '\r']);
    if content.trim().is_empty() {
        return (LineClass::Blank, None);
    }
    let stripped = content.trim_start_matches([' ', '\t', '\x0c']);
    if stripped.starts_with('#') {
        return (LineClass::Comment, None);
    }
    if stripped.len() != content.len() {
        return (LineClass::Indented, None);
    }
    if stripped.starts_with('@') {
        return (LineClass::Decorator, None);
    }
    if let Some(c) = DEF_RE.captures(stripped) {
        return (LineClass::Def, Some(c[1].to_string()));
    }
    if let Some(c) = CLASS_RE.captures(stripped) {
        return (LineClass::Class, Some(c[1].to_string()));
    }
    if IMPORT_RE.is_match(stripped) {
        return (LineClass::Import, None);
    }
    (LineClass::Other, None)
}

fn logical_lines(text: &str) -> Vec<LogicalLine> {
    let mut out = Vec::new();
    let mut state = LexState::default();
    let mut current: Option<Range<usize>> = None;
    for line in physical_lines(text) {
        let continues = state.scan(&text.as_bytes()[line.clone()]);
        let range = match current.take() {
            Some(open) => open.start..line.end,
            None => line,
        };
        if continues {
            current = Some(range);
        } else {
            out.push(range);
        }
    }
    out.extend(current);
    out.into_iter()
        .map(|bytes| {
            let first = physical_lines(&text[bytes.clone()]).next().unwrap_or(0..0);
            let (class, name) = classify(&text[bytes.start..bytes.start + first.end]);
            LogicalLine { bytes, class, name }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StmtKind {
    Import,
    Other,
    Def,
    Class,
}

enum Item {
    Gap { line: usize, is_comment: bool },
    Stmt { kind: StmtKind, name: Option<String>, lines: Range<usize> },
}

/// Index one past the last line of the indented block that follows `header`.
/// Blank and comment lines only count when more indented code follows them.
fn block_end(lines: &[LogicalLine], header: usize) -> usize {
    let mut last = header;
    for (j, line) in lines.iter().enumerate().skip(header + 1) {
        match line.class {
            LineClass::Indented => last = j,
            LineClass::Blank | LineClass::Comment => {}
            _ => break,
        }
    }
    last + 1
}

fn items(lines: &[LogicalLine]) -> Vec<Item> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let line = &lines[i];
        match line.class {
            LineClass::Blank | LineClass::Comment => {
                out.push(Item::Gap { line: i, is_comment: line.class == LineClass::Comment });
                i += 1;
            }
            LineClass::Import => {
                out.push(Item::Stmt { kind: StmtKind::Import, name: None, lines: i..i + 1 });
                i += 1;
            }
            LineClass::Def | LineClass::Class => {
                let kind = if line.class == LineClass::Def { StmtKind::Def } else { StmtKind::Class };
                let end = block_end(lines, i);
                out.push(Item::Stmt { kind, name: line.name.clone(), lines: i..end });
                i = end;
            }
            LineClass::Decorator => {
                // Decorators, possibly separated by blanks or comments, then the header.
                let mut j = i + 1;
                while j < lines.len()
                    && matches!(lines[j].class, LineClass::Decorator | LineClass::Blank | LineClass::Comment)
                {
                    j += 1;
                }
                match lines.get(j).map(|l| l.class) {
                    Some(LineClass::Def) | Some(LineClass::Class) => {
                        let kind = if lines[j].class == LineClass::Def { StmtKind::Def } else { StmtKind::Class };
                        let end = block_end(lines, j);
                        out.push(Item::Stmt { kind, name: lines[j].name.clone(), lines: i..end });
                        i = end;
                    }
                    _ => {
                        out.push(Item::Stmt { kind: StmtKind::Other, name: None, lines: i..i + 1 });
                        i += 1;
                    }
                }
            }
            LineClass::Other | LineClass::Indented => {
                let end = block_end(lines, i);
                out.push(Item::Stmt { kind: StmtKind::Other, name: None, lines: i..end });
                i = end;
            }
        }
    }
    out
}

fn chunk_kind(kind: StmtKind) -> ChunkKind {
    match kind {
        StmtKind::Import => ChunkKind::ModuleImports,
        StmtKind::Other => ChunkKind::GlobalVars,
        StmtKind::Def => ChunkKind::FunctionDef,
        StmtKind::Class => ChunkKind::ClassDef,
    }
}

/// Splits `text` into ordered, contiguous chunks covering every byte.
pub fn chunk_source(text: &[u8], file: &Path) -> Result<Vec<Chunk>, ChunkError> {
    let text = std::str::from_utf8(text).map_err(|e| ChunkError::InvalidEncoding(e.valid_up_to()))?;
    Ok(chunk_str(text, file))
}

/// [`chunk_source`] for text that is already known to be UTF-8.
pub fn chunk_str(text: &str, file: &Path) -> Vec<Chunk> {
    if text.is_empty() {
        return Vec::new();
    }
    let lines = logical_lines(text);
    let items = items(&lines);

    // Each statement owns a range of logical lines; gaps are then folded into
    // a neighbour.
    struct Owned {
        kind: ChunkKind,
        name: Option<String>,
        first: usize,
        last: usize,
    }
    let mut owned: Vec<Owned> = Vec::new();
    let mut gap: Vec<(usize, bool)> = Vec::new();
    let flush_gap = |owned: &mut Vec<Owned>, gap: &mut Vec<(usize, bool)>, next_first: Option<&mut usize>| {
        if gap.is_empty() {
            return;
        }
        let prev = owned.last_mut();
        match (prev, next_first) {
            (None, Some(first)) => *first = gap[0].0,
            (Some(p), None) => p.last = gap[gap.len() - 1].0,
            (Some(p), Some(first)) => {
                if p.kind.is_named() {
                    *first = gap[0].0;
                } else {
                    match gap.iter().position(|&(_, c)| c) {
                        None => p.last = gap[gap.len() - 1].0,
                        Some(0) => *first = gap[0].0,
                        Some(k) => {
                            p.last = gap[k - 1].0;
                            *first = gap[k].0;
                        }
                    }
                }
            }
            (None, None) => unreachable!("flush_gap without neighbours"),
        }
        gap.clear();
    };
    for item in items {
        match item {
            Item::Gap { line, is_comment } => gap.push((line, is_comment)),
            Item::Stmt { kind, name, lines: range } => {
                let mut first = range.start;
                flush_gap(&mut owned, &mut gap, Some(&mut first));
                owned.push(Owned { kind: chunk_kind(kind), name, first, last: range.end - 1 });
            }
        }
    }
    if !gap.is_empty() {
        if owned.is_empty() {
            // Only blank and comment lines.
            owned.push(Owned { kind: ChunkKind::GlobalVars, name: None, first: 0, last: lines.len() - 1 });
        } else {
            flush_gap(&mut owned, &mut gap, None);
        }
    }

    let mut chunks: Vec<Chunk> = Vec::with_capacity(owned.len());
    for o in owned {
        let span = lines[o.first].bytes.start..lines[o.last].bytes.end;
        if let Some(prev) = chunks.last_mut() {
            let mergeable = matches!(o.kind, ChunkKind::ModuleImports | ChunkKind::GlobalVars);
            if mergeable && prev.kind == o.kind {
                prev.byte_span.end = span.end;
                prev.text = text[prev.byte_span.clone()].to_string();
                continue;
            }
        }
        chunks.push(Chunk {
            kind: o.kind,
            name: o.name,
            file: file.to_path_buf(),
            text: text[span.clone()].to_string(),
            byte_span: span,
        });
    }
    chunks
}

/// Concatenates chunk texts after checking that the spans tile `[0, len)`.
pub fn reassemble(chunks: &[Chunk]) -> Result<String, ChunkError> {
    let mut out = String::new();
    let mut offset = 0;
    for (i, chunk) in chunks.iter().enumerate() {
        if chunk.file != chunks[0].file {
            return Err(ChunkError::MixedFiles);
        }
        if chunk.byte_span.start != offset || chunk.byte_span.len() != chunk.text.len() {
            return Err(ChunkError::NonContiguousSpans(i));
        }
        offset = chunk.byte_span.end;
        out.push_str(&chunk.text);
    }
    Ok(out)
}

/// Replaces the text of chunk `index` and re-chunks the file.
///
/// The patch must leave every other chunk byte-identical and keep the kind
/// sequence; only the patched entry's name may change (a rename).
pub fn apply_patch(chunks: &[Chunk], index: usize, new_text: &str) -> Result<Vec<Chunk>, ChunkError> {
    let target = chunks
        .get(index)
        .ok_or(ChunkError::IndexOutOfRange { index, len: chunks.len() })?;
    if target.kind == ChunkKind::ModuleImports {
        return Err(ChunkError::ImportChunkFrozen);
    }
    reassemble(chunks)?;
    let mut text = String::new();
    for (i, c) in chunks.iter().enumerate() {
        text.push_str(if i == index { new_text } else { &c.text });
    }
    let rechunked = chunk_str(&text, &target.file);
    if rechunked.len() != chunks.len() {
        return Err(ChunkError::StructureBroken(format!(
            "{} top-level chunks became {}",
            chunks.len(),
            rechunked.len()
        )));
    }
    for (i, (old, new)) in chunks.iter().zip(&rechunked).enumerate() {
        if old.kind != new.kind {
            return Err(ChunkError::StructureBroken(format!(
                "chunk {i} changed kind from {} to {}",
                old.kind, new.kind
            )));
        }
        if i != index && (old.text != new.text || old.name != new.name) {
            return Err(ChunkError::StructureBroken(format!("patch spilled into chunk {i}")));
        }
    }
    Ok(rechunked)
}

/// Top-level `NAME = ...` assignments of a chunk, in order of appearance.
fn assigned_names(text: &str, out: &mut Vec<String>) {
    for line in logical_lines(text) {
        if line.class != LineClass::Other {
            continue;
        }
        if let Some(c) = GLOBAL_RE.captures(&text[line.bytes]) {
            let name = c[1].to_string();
            if !out.contains(&name) {
                out.push(name);
            }
        }
    }
}

pub fn extract_structure(chunks: &[Chunk]) -> FileStructure {
    let mut global_names = Vec::new();
    for chunk in chunks.iter().filter(|c| c.kind == ChunkKind::GlobalVars) {
        assigned_names(&chunk.text, &mut global_names);
    }
    FileStructure {
        file: chunks.first().map(|c| c.file.clone()).unwrap_or_default(),
        entries: chunks
            .iter()
            .map(|c| StructureEntry { kind: c.kind, name: c.name.clone(), line_count: c.line_count() })
            .collect(),
        global_names,
    }
}

/// Renders the chunk table printed by the `chunks` subcommand.
pub fn render_table(chunks: &[Chunk]) -> String {
    let mut out = format!("{:<4} {:<14} {:<28} {:>14} {:>6}\n", "#", "KIND", "NAME", "SPAN", "LINES");
    for (i, c) in chunks.iter().enumerate() {
        let span = format!("{}..{}", c.byte_span.start, c.byte_span.end);
        out.push_str(&format!(
            "{:<4} {:<14} {:<28} {:>14} {:>6}\n",
            i,
            c.kind.to_string(),
            c.name.as_deref().unwrap_or("-"),
            span,
            c.line_count()
        ));
    }
    out
}
