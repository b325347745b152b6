//! A deterministic backend driven by a rule table.
//!
//! The table is a JSON list of rules:
//!
//! ```json
//! [{"match": "LEARNING_RATE = 0.01", "replace": "LEARNING_RATE = 0.004",
//!   "fail_times": 0, "summary": "Lowered the learning rate"}]
//! ```
//!
//! Optional keys: `purpose` (`"mutate"`, the default, or `"repair"`),
//! `agents` (agent ids the rule is limited to), `request` (a
//! `<Kind>: <rationale>` request to emit alongside the code) and `fail_kind`
//! (`"rate_limited"`, the default, `"server_error"`, `"timeout"` or
//! `"empty"`).
//!
//! Matching is literal substring search on the chunk text. For a mutation
//! request every applicable rule is applied, in table order, to the chunk
//! the payload delimits; the response is the result in one fenced block. A
//! rule with `fail_times = n` makes the first `n` matching requests of each
//! agent fail instead. Summary requests answer with the summaries of the
//! rules that matched the original text, and repair requests answer with a
//! `CHUNK <file> <index>` block for every chunk a repair rule changes. Every
//! request is captured for inspection.

use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::model::AgentId;

use super::backend::{estimate_tokens, Backend, BackendError, BackendRequest, BackendResponse, Purpose};
use super::prompt::{parse_fenced_chunks, summary_before};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RulePurpose {
    #[default]
    Mutate,
    Repair,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailKind {
    #[default]
    RateLimited,
    ServerError,
    Timeout,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub pattern: String,
    pub replace: String,
    #[serde(default)]
    pub fail_times: u32,
    pub summary: String,
    #[serde(default)]
    pub purpose: RulePurpose,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agents: Vec<AgentId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<String>,
    #[serde(default)]
    pub fail_kind: FailKind,
}

impl MockRule {
    pub fn new(pattern: &str, replace: &str, summary: &str) -> Self {
        Self {
            pattern: pattern.into(),
            replace: replace.into(),
            fail_times: 0,
            summary: summary.into(),
            purpose: RulePurpose::Mutate,
            agents: Vec::new(),
            request: None,
            fail_kind: FailKind::RateLimited,
        }
    }

    fn applies(&self, purpose: RulePurpose, agent: Option<AgentId>, text: &str) -> bool {
        self.purpose == purpose
            && (self.agents.is_empty() || agent.is_some_and(|a| self.agents.contains(&a)))
            && text.contains(&self.pattern)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RuleTableError {
    #[error("cannot read rule table {path}: {source}")]
    Unreadable { path: String, source: std::io::Error },
    #[error("invalid rule table: {0}")]
    Invalid(#[from] serde_json::Error),
}

pub fn load_rules(path: &Path) -> Result<Vec<MockRule>, RuleTableError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| RuleTableError::Unreadable { path: path.display().to_string(), source })?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Default)]
pub struct MockBackend {
    rules: Vec<MockRule>,
    failures: Mutex<HashMap<(usize, Option<AgentId>), u32>>,
    captured: Mutex<Vec<BackendRequest>>,
}

fn fenced(text: &str) -> String {
    let mut out = String::from("```python\n");
    out.push_str(text);
    if !text.ends_with('\n') {
        out.push('\n');
    }
    out.push_str("```\n");
    out
}

impl MockBackend {
    pub fn new(rules: Vec<MockRule>) -> Self {
        Self { rules, ..Self::default() }
    }

    pub fn from_file(path: &Path) -> Result<Self, RuleTableError> {
        Ok(Self::new(load_rules(path)?))
    }

    pub fn rules(&self) -> &[MockRule] {
        &self.rules
    }

    /// Every request received so far, in arrival order.
    pub fn captured(&self) -> Vec<BackendRequest> {
        self.captured.lock().unwrap().clone()
    }

    fn apply(&self, purpose: RulePurpose, agent: Option<AgentId>, text: &str) -> (String, Vec<usize>) {
        let mut out = text.to_string();
        let mut hits = Vec::new();
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.applies(purpose, agent, &out) {
                out = out.replace(&rule.pattern, &rule.replace);
                hits.push(i);
            }
        }
        (out, hits)
    }

    /// Consumes one scripted failure of the first matching rule that still has one.
    fn scripted_failure(&self, hits: &[usize], agent: Option<AgentId>) -> Option<BackendError> {
        let mut failures = self.failures.lock().unwrap();
        for &i in hits {
            let rule = &self.rules[i];
            let used = failures.entry((i, agent)).or_insert(0);
            if *used < rule.fail_times {
                *used += 1;
                return Some(match rule.fail_kind {
                    FailKind::RateLimited => BackendError::RateLimited,
                    FailKind::ServerError => BackendError::ServerError { status: 503 },
                    FailKind::Timeout => BackendError::Timeout,
                    FailKind::Empty => BackendError::EmptyCompletion,
                });
            }
        }
        None
    }

    fn mutate(&self, request: &BackendRequest) -> Result<String, BackendError> {
        let agent = request.tags.agent;
        let Some(chunk) = parse_fenced_chunks(&request.user_payload).into_iter().last() else {
            return Ok("I found no chunk to rewrite.".into());
        };
        let (text, hits) = self.apply(RulePurpose::Mutate, agent, &chunk.text);
        if let Some(e) = self.scripted_failure(&hits, agent) {
            return Err(e);
        }
        let mut out = String::new();
        for &i in &hits {
            if let Some(r) = &self.rules[i].request {
                out.push_str(&format!("REQUEST: {r}\n"));
            }
        }
        out.push_str(&fenced(&text));
        Ok(out)
    }

    fn summarize(&self, request: &BackendRequest) -> String {
        let before = summary_before(&request.user_payload).unwrap_or_default();
        let (_, hits) = self.apply(RulePurpose::Mutate, request.tags.agent, before);
        if hits.is_empty() {
            return "No functional change.".into();
        }
        hits.iter().map(|&i| self.rules[i].summary.as_str()).collect::<Vec<_>>().join(" ")
    }

    fn repair(&self, request: &BackendRequest) -> Result<String, BackendError> {
        let agent = request.tags.agent;
        let mut out = String::new();
        for chunk in parse_fenced_chunks(&request.user_payload) {
            let (text, hits) = self.apply(RulePurpose::Repair, agent, &chunk.text);
            if hits.is_empty() {
                continue;
            }
            if let Some(e) = self.scripted_failure(&hits, agent) {
                return Err(e);
            }
            out.push_str(&format!("CHUNK {} {}\n", chunk.file.as_deref().unwrap_or("-"), chunk.index));
            out.push_str(&fenced(&text));
        }
        if out.is_empty() {
            out.push_str("NO CHANGES\n");
        }
        Ok(out)
    }
}

impl Backend for MockBackend {
    fn send(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        self.captured.lock().unwrap().push(request.clone());
        let text = match request.tags.purpose {
            Purpose::Mutate => self.mutate(request)?,
            Purpose::Summarize => self.summarize(request),
            Purpose::Repair => self.repair(request)?,
        };
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        request.user_payload.hash(&mut hasher);
        let metadata = BTreeMap::from([
            ("model".to_string(), "mock".into()),
            ("request_id".to_string(), format!("mock-{:016x}", hasher.finish()).into()),
            ("latency_ms".to_string(), 0.into()),
        ]);
        Ok(BackendResponse {
            prompt_tokens: estimate_tokens(&request.system_instructions) as u64
                + estimate_tokens(&request.user_payload) as u64,
            completion_tokens: estimate_tokens(&text) as u64,
            text,
            backend_metadata: metadata,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::{chunk_str, extract_structure};
    use crate::mutation::backend::{complete, RequestTags, RetryPolicy};
    use crate::mutation::prompt::{build_prompt, build_summary_prompt, PromptContext};
    use std::time::Duration;

    fn mutate_request(src: &str, agent: Option<AgentId>) -> BackendRequest {
        let chunks = chunk_str(src, Path::new("train.py"));
        let ctx = PromptContext::new(extract_structure(&chunks), 4096, 256);
        let tags = RequestTags { purpose: Purpose::Mutate, agent, generation: Some(0) };
        build_prompt(&chunks[0], 0, &ctx, tags).unwrap()
    }

    #[test]
    fn scripted_substitution() {
        let mock = MockBackend::new(vec![MockRule::new("LR=0.01", "LR=0.005", "halved lr")]);
        let r = mock.send(&mutate_request("LR=0.01\n", None)).unwrap();
        assert_eq!(r.text, "```python\nLR=0.005\n```\n");
        assert!(r.prompt_tokens > 0);
        assert_eq!(mock.captured().len(), 1);
    }

    #[test]
    fn fails_twice_then_succeeds_under_retry() {
        let mut rule = MockRule::new("LR=0.01", "LR=0.005", "halved lr");
        rule.fail_times = 2;
        let mock = MockBackend::new(vec![rule]);
        let policy = RetryPolicy { max_retries: 3, base_backoff: Duration::from_millis(1) };
        let r = complete(&mock, &mutate_request("LR=0.01\n", None), &policy).unwrap();
        assert!(r.text.contains("LR=0.005"));
        assert_eq!(r.backend_metadata["retries"], 2);
        assert_eq!(mock.captured().len(), 3);
    }

    #[test]
    fn agent_filter_and_requests() {
        let mut rule = MockRule::new("X = 1", "X = 2", "bumped X");
        rule.agents = vec![AgentId::new(0, 3)];
        rule.request = Some("DatasetUpgrade: need a larger corpus".into());
        let mock = MockBackend::new(vec![rule]);
        let other = mock.send(&mutate_request("X = 1\n", Some(AgentId::new(0, 2)))).unwrap();
        assert_eq!(other.text, "```python\nX = 1\n```\n");
        let hit = mock.send(&mutate_request("X = 1\n", Some(AgentId::new(0, 3)))).unwrap();
        assert!(hit.text.starts_with("REQUEST: DatasetUpgrade: need a larger corpus\n```python\nX = 2\n"));
    }

    #[test]
    fn summaries_name_the_applied_rules() {
        let mock = MockBackend::new(vec![
            MockRule::new("a = 1", "a = 2", "Changed a."),
            MockRule::new("b = 1", "b = 2", "Changed b."),
        ]);
        let tags = RequestTags { purpose: Purpose::Mutate, agent: None, generation: None };
        let r = mock.send(&build_summary_prompt("a = 1\nb = 1\n", "a = 2\nb = 2\n", tags)).unwrap();
        assert_eq!(r.text, "Changed a. Changed b.");
        let r = mock.send(&build_summary_prompt("c = 1\n", "c = 1\n", tags)).unwrap();
        assert_eq!(r.text, "No functional change.");
    }

    #[test]
    fn rule_table_json() {
        let json = r#"[{"match": "a", "replace": "b", "fail_times": 1, "summary": "s"},
                       {"match": "x", "replace": "y", "summary": "t", "purpose": "repair", "agents": ["001-002"]}]"#;
        let rules: Vec<MockRule> = serde_json::from_str(json).unwrap();
        assert_eq!(rules[0].fail_times, 1);
        assert_eq!(rules[1].purpose, RulePurpose::Repair);
        assert_eq!(rules[1].agents, vec![AgentId::new(1, 2)]);
        assert!(serde_json::from_str::<Vec<MockRule>>(r#"[{"match":"a","replace":"b","summary":"s","x":1}]"#).is_err());
    }
}
