//! Run configuration.
//!
//! The on-disk format is TOML. Every key except `trainee.template` and
//! `trainee.command` is optional; the population defaults are N=10, k=4,
//! G=5 and p=0.3. Relative paths are resolved against the directory that
//! holds the config file. See `book/src/configuration.md` for the full
//! schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Patterns that are always excluded from mutation: evaluation, sampling and
/// benchmarking scripts of a trainee.
pub const DEFAULT_EXCLUDED: &[&str] = &["bench*.py", "eval*.py", "sample*.py"];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    UnreadableFile { path: PathBuf, source: std::io::Error },
    #[error("config does not parse: {0}")]
    Parse(String),
    #[error("missing required field `{0}`")]
    MissingField(&'static str),
    #[error("`{field}` out of range: {message}")]
    RangeViolation { field: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Mock rule table (JSON). Absent means an empty table.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rules: Option<PathBuf>,
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub request_timeout_s: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            rules: None,
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_retries: 3,
            backoff_ms: 500,
            request_timeout_s: 120.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraineeConfig {
    pub template: PathBuf,
    pub command: Vec<String>,
    pub timeout_s: f64,
    /// Prepended to `command`, e.g. `["docker", "run", "--rm", ...]`.
    pub container_command_prefix: Vec<String>,
    pub excluded_files: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HitlConfig {
    pub pause_between_generations: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub population_size: usize,
    pub survivors: usize,
    pub generations: u32,
    pub mutation_probability: f64,
    pub worker_count: usize,
    pub memory_enabled: bool,
    pub memory_context_limit: usize,
    pub token_budget: usize,
    pub max_output_tokens: u32,
    pub rng_seed: u64,
    pub run_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub controller_dir: Option<PathBuf>,
    pub backend: BackendConfig,
    pub trainee: TraineeConfig,
    pub hitl: HitlConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    population_size: Option<i64>,
    survivors: Option<i64>,
    generations: Option<i64>,
    mutation_probability: Option<f64>,
    worker_count: Option<i64>,
    memory_enabled: Option<bool>,
    memory_context_limit: Option<i64>,
    token_budget: Option<i64>,
    max_output_tokens: Option<i64>,
    rng_seed: Option<i64>,
    run_dir: Option<PathBuf>,
    controller_dir: Option<PathBuf>,
    backend: Option<RawBackend>,
    trainee: Option<RawTrainee>,
    hitl: Option<HitlConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBackend {
    kind: Option<BackendKind>,
    rules: Option<PathBuf>,
    endpoint: Option<String>,
    model: Option<String>,
    api_key_env: Option<String>,
    max_retries: Option<u32>,
    backoff_ms: Option<u64>,
    request_timeout_s: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrainee {
    template: Option<PathBuf>,
    command: Option<Vec<String>>,
    timeout_s: Option<f64>,
    container_command_prefix: Option<Vec<String>>,
    excluded_files: Option<Vec<String>>,
}

fn range(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::RangeViolation { field, message: message.into() }
}

fn positive(field: &'static str, v: Option<i64>, default: i64) -> Result<usize, ConfigError> {
    let v = v.unwrap_or(default);
    if v < 1 {
        return Err(range(field, format!("{v} < 1")));
    }
    Ok(v as usize)
}

/// Seeds round-trip through TOML, whose integers are signed 64-bit.
fn seed(v: i64) -> Result<u64, ConfigError> {
    u64::try_from(v).map_err(|_| range("rng_seed", format!("{v} < 0")))
}

/// Largest seed a config can carry.
pub const MAX_SEED: u64 = i64::MAX as u64;

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::UnreadableFile { path: path.to_path_buf(), source })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
    let base = std::path::absolute(&base).unwrap_or(base);
    parse_config(&text, &base)
}

/// Parses config text, resolving relative paths against `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };

    let population_size = positive("population_size", raw.population_size, 10)?;
    if population_size < 2 {
        return Err(range("population_size", "population needs at least 2 agents"));
    }
    let survivors = positive("survivors", raw.survivors, 4)?;
    if survivors > population_size {
        return Err(range("survivors", format!("{survivors} > population_size {population_size}")));
    }
    let generations = positive("generations", raw.generations, 5)? as u32;
    let p = raw.mutation_probability.unwrap_or(0.3);
    if !(0.0..=1.0).contains(&p) {
        return Err(range("mutation_probability", format!("{p} not in [0, 1]")));
    }
    let worker_count = positive("worker_count", raw.worker_count, 4)?;
    let memory_context_limit = raw.memory_context_limit.unwrap_or(8);
    if memory_context_limit < 0 {
        return Err(range("memory_context_limit", "negative"));
    }
    let token_budget = positive("token_budget", raw.token_budget, 4096)?;
    let max_output_tokens = positive("max_output_tokens", raw.max_output_tokens, 2048)? as u32;

    let rb = raw.backend.unwrap_or_default();
    let defaults = BackendConfig::default();
    let backend = BackendConfig {
        kind: rb.kind.unwrap_or(defaults.kind),
        rules: rb.rules.map(resolve),
        endpoint: rb.endpoint.unwrap_or(defaults.endpoint),
        model: rb.model.unwrap_or(defaults.model),
        api_key_env: rb.api_key_env.unwrap_or(defaults.api_key_env),
        max_retries: rb.max_retries.unwrap_or(defaults.max_retries),
        backoff_ms: rb.backoff_ms.unwrap_or(defaults.backoff_ms),
        request_timeout_s: rb.request_timeout_s.unwrap_or(defaults.request_timeout_s),
    };
    if backend.request_timeout_s.is_nan() || backend.request_timeout_s <= 0.0 {
        return Err(range("backend.request_timeout_s", "must be > 0"));
    }

    let rt = raw.trainee.ok_or(ConfigError::MissingField("trainee"))?;
    let template = rt.template.ok_or(ConfigError::MissingField("trainee.template"))?;
    let command = rt.command.ok_or(ConfigError::MissingField("trainee.command"))?;
    if command.is_empty() {
        return Err(range("trainee.command", "empty argument vector"));
    }
    let timeout_s = rt.timeout_s.unwrap_or(600.0);
    if timeout_s.is_nan() || timeout_s <= 0.0 {
        return Err(range("trainee.timeout_s", "must be > 0"));
    }
    let mut excluded_files = rt.excluded_files.unwrap_or_default();
    for pattern in DEFAULT_EXCLUDED {
        if !excluded_files.iter().any(|p| p == pattern) {
            excluded_files.push((*pattern).to_string());
        }
    }
    for pattern in &excluded_files {
        glob::Pattern::new(pattern)
            .map_err(|e| range("trainee.excluded_files", format!("`{pattern}`: {e}")))?;
    }
    let trainee = TraineeConfig {
        template: resolve(template),
        command,
        timeout_s,
        container_command_prefix: rt.container_command_prefix.unwrap_or_default(),
        excluded_files,
    };

    Ok(RunConfig {
        population_size,
        survivors,
        generations,
        mutation_probability: p,
        worker_count,
        memory_enabled: raw.memory_enabled.unwrap_or(true),
        memory_context_limit: memory_context_limit as usize,
        token_budget,
        max_output_tokens,
        rng_seed: seed(raw.rng_seed.unwrap_or(0))?,
        run_dir: resolve(raw.run_dir.unwrap_or_else(|| PathBuf::from("run"))),
        controller_dir: raw.controller_dir.map(resolve),
        backend,
        trainee,
        hitl: raw.hitl.unwrap_or_default(),
    })
}

impl RunConfig {
    /// Renders the config back to TOML. Parsing the output yields an equal
    /// config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig always serializes")
    }

    /// Whether `relative` (a path inside an agent workdir) is excluded from
    /// mutation. Patterns match either the file name or the whole relative
    /// path.
    pub fn is_excluded(&self, relative: &Path) -> bool {
        let name = relative.file_name().map(|n| n.to_string_lossy().into_owned());
        self.trainee.excluded_files.iter().any(|p| {
            let Ok(pattern) = glob::Pattern::new(p) else { return false };
            pattern.matches_path(relative) || name.as_deref().is_some_and(|n| pattern.matches(n))
        })
    }
}
