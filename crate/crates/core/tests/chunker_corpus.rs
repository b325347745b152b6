//! Chunker checks over the bundled corpus and generated sources.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use codevolve::chunker::{chunk_source, chunk_str, extract_structure, reassemble, ChunkKind};
use proptest::prelude::*;

mod common;
use common::source_file;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn corpus() -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(fixtures().join("corpus"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "py"))
        .collect();
    files.sort();
    files
}

type Golden = BTreeMap<String, Vec<(String, Option<String>)>>;

fn golden() -> Golden {
    let text = std::fs::read_to_string(fixtures().join("oracle_chunks.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn kind_name(kind: ChunkKind) -> &'static str {
    match kind {
        ChunkKind::ModuleImports => "ModuleImports",
        ChunkKind::GlobalVars => "GlobalVars",
        ChunkKind::ClassDef => "ClassDef",
        ChunkKind::FunctionDef => "FunctionDef",
    }
}

#[test]
fn corpus_is_large_enough() {
    assert!(corpus().len() >= 20);
}

#[test]
fn corpus_round_trips_byte_for_byte() {
    for path in corpus() {
        let bytes = std::fs::read(&path).unwrap();
        let chunks = chunk_source(&bytes, &path).unwrap();
        assert_eq!(reassemble(&chunks).unwrap().as_bytes(), &bytes[..], "{}", path.display());
    }
}

#[test]
fn corpus_matches_ast_oracle() {
    let golden = golden();
    for path in corpus() {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let text = std::fs::read_to_string(&path).unwrap();
        let got: Vec<(String, Option<String>)> = chunk_str(&text, &path)
            .iter()
            .map(|c| (kind_name(c.kind).to_string(), c.name.clone()))
            .collect();
        let want = golden.get(&name).unwrap_or_else(|| panic!("no oracle entry for {name}"));
        assert_eq!(&got, want, "{name}");
    }
}

/// The frozen oracle output must still be what the oracle script produces.
#[test]
fn frozen_oracle_is_current() {
    let mut cmd = Command::new("python3");
    cmd.arg(fixtures().join("oracle_chunks.py")).args(corpus());
    let Ok(out) = cmd.output() else {
        eprintln!("python3 not available; skipping oracle refresh check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fresh: Golden = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(fresh, golden());
}

#[test]
fn nanogpt_style_structure() {
    let path = fixtures().join("corpus/gpt_train.py");
    let text = std::fs::read_to_string(&path).unwrap();
    let structure = extract_structure(&chunk_str(&text, &path));
    let kinds: Vec<ChunkKind> = structure.entries.iter().map(|e| e.kind).collect();
    assert_eq!(&kinds[..3], &[ChunkKind::GlobalVars, ChunkKind::ModuleImports, ChunkKind::GlobalVars]);
    assert!(kinds.contains(&ChunkKind::ClassDef));
    assert!(kinds.contains(&ChunkKind::FunctionDef));
    for name in ["learning_rate", "batch_size", "block_size", "dropout", "ctx"] {
        assert!(structure.global_names.iter().any(|g| g == name), "{name}");
    }
    let functions: Vec<_> = structure
        .entries
        .iter()
        .filter(|e| e.kind == ChunkKind::FunctionDef)
        .filter_map(|e| e.name.as_deref())
        .collect();
    assert_eq!(functions, vec!["get_batch", "estimate_loss", "get_lr", "train", "write_metrics"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn generated_sources_round_trip(text in source_file()) {
        let chunks = chunk_str(&text, Path::new("gen.py"));
        prop_assert_eq!(reassemble(&chunks).unwrap(), text.clone());
        let mut offset = 0;
        for c in &chunks {
            prop_assert_eq!(c.byte_span.start, offset);
            prop_assert!(c.byte_span.end > c.byte_span.start);
            prop_assert_eq!(c.kind.is_named(), c.name.is_some());
            offset = c.byte_span.end;
        }
        prop_assert_eq!(offset, text.len());
        let again = chunk_str(&reassemble(&chunks).unwrap(), Path::new("gen.py"));
        prop_assert_eq!(again, chunks);
    }
}
