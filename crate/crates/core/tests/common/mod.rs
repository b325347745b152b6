#![allow(dead_code)]

use std::path::{Path, PathBuf};

use codevolve::config::{load_config, RunConfig};
use proptest::prelude::*;

pub fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy")
}

/// The toy config with its run directory moved under `tmp`.
pub fn toy_config(tmp: &Path) -> RunConfig {
    let mut cfg = load_config(&toy_dir().join("toy.toml")).expect("toy config loads");
    cfg.run_dir = tmp.join("run");
    cfg
}

// Oracle of the toy benchmark, transcribed by hand from bench.py.
pub fn toy_perplexity(lr: f64, warmup: f64, seed: u64) -> f64 {
    let noise = 0.25 * ((seed * 1103515245 + 12345) % 2147483648) as f64 / 2147483648.0;
    let a = (lr - 0.003) / 0.01;
    let b = (warmup - 40.0) / 100.0;
    31.9 + 7.5 * (a * a + b * b) + noise
}

/// Python-like sources mixing every construct the chunker treats specially.
pub fn source_line() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("import os\n".to_string()),
        Just("from a.b import (c,\n    d)\n".to_string()),
        Just("X = 1\n".to_string()),
        Just("Y: int = [1,\n 2]\n".to_string()),
        Just("def f(a, b):\n    return a\n".to_string()),
        Just("async def g():\n    await h()\n\n    pass\n".to_string()),
        Just("class K(Base):\n    x = 1\n    def m(self):\n        return 2\n".to_string()),
        Just("@deco\n".to_string()),
        Just("    indented = 3\n".to_string()),
        Just("\n".to_string()),
        Just("   \n".to_string()),
        Just("# comment\n".to_string()),
        Just("s = \"\"\"\ndef inside():\n\"\"\"\n".to_string()),
        Just("t = 'it''s'\n".to_string()),
        Just("u = (1,\n".to_string()),
        Just(")\n".to_string()),
        Just("v = 1 + \\\n    2\n".to_string()),
        Just("if __name__ == '__main__':\n    main()\n".to_string()),
        Just("w = \"unterminated\n".to_string()),
        Just("crlf = 1\r\n".to_string()),
        Just("é = 'ünïcode'\n".to_string()),
        "[a-z =():#'\"\\\\\\[\\]{}\t]{0,12}\n?",
    ]
}

pub fn source_file() -> impl Strategy<Value = String> {
    prop::collection::vec(source_line(), 0..40).prop_map(|lines| lines.concat())
}


/// Writes a rule table into `dir` and points `cfg` at it.
pub fn use_rules(cfg: &mut RunConfig, dir: &Path, rules: &serde_json::Value) {
    let path = dir.join("rules.json");
    std::fs::write(&path, serde_json::to_string_pretty(rules).unwrap()).unwrap();
    cfg.backend.rules = Some(path);
}

/// The toy rule table as shipped.
pub fn toy_rules() -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(toy_dir().join("rules.json")).unwrap()).unwrap()
}

/// Rules that break `train` for `broken` agents and repair it for `fixed`.
pub fn fault_rules(broken: &[String], fixed: &[String]) -> serde_json::Value {
    let mut rules = toy_rules().as_array().unwrap().clone();
    rules.push(serde_json::json!({
        "match": "    area = 0.0",
        "replace": "    area = UNDEFINED_AREA",
        "summary": "Initialised the accumulator from a module constant.",
        "agents": broken,
    }));
    rules.push(serde_json::json!({
        "match": "UNDEFINED_AREA",
        "replace": "0.0",
        "summary": "Restored the accumulator initialiser.",
        "purpose": "repair",
        "agents": fixed,
    }));
    serde_json::Value::Array(rules)
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display())))
        .unwrap()
}
