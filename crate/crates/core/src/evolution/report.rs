//! Rendering persisted runs: the per-generation table and the summary block.
//! Everything here reads files; nothing is recomputed from agents.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{GenerationSummary, GenerationTiming, GenerationView, RunReport, RunTiming, RUN_REPORT_FILE, RUN_TIMING_FILE};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no run report at {0}")]
    Missing(PathBuf),
    #[error("cannot read {path}: {source}")]
    Unreadable { path: PathBuf, source: std::io::Error },
    #[error("corrupt {path}: {source}")]
    Corrupt { path: PathBuf, source: serde_json::Error },
}

/// A run as found on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistedRun {
    /// Exact bytes of `run_report.json`.
    pub raw_report: String,
    pub report: RunReport,
    pub timing: Option<RunTiming>,
}

pub fn load_run(run_dir: &Path) -> Result<PersistedRun, ReportError> {
    let path = run_dir.join(RUN_REPORT_FILE);
    let raw_report = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(ReportError::Missing(path)),
        Err(source) => return Err(ReportError::Unreadable { path, source }),
    };
    let report = serde_json::from_str(&raw_report).map_err(|source| ReportError::Corrupt { path: path.clone(), source })?;
    // Timing is optional: a report is still renderable without it.
    let timing_path = run_dir.join(RUN_TIMING_FILE);
    let timing = fs::read_to_string(&timing_path).ok().and_then(|t| serde_json::from_str(&t).ok());
    Ok(PersistedRun { raw_report, report, timing })
}

/// Summaries persisted so far (`gen<g>/summary.json`), joined with timing.
pub fn load_generations(run_dir: &Path) -> Result<Vec<GenerationView>, ReportError> {
    let mut out = Vec::new();
    for g in 0.. {
        let dir = run_dir.join(format!("gen{g}"));
        let path = dir.join(super::SUMMARY_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => break,
            Err(source) => return Err(ReportError::Unreadable { path, source }),
        };
        let summary: GenerationSummary =
            serde_json::from_str(&text).map_err(|source| ReportError::Corrupt { path: path.clone(), source })?;
        let wall_time_s = fs::read_to_string(dir.join(RUN_TIMING_FILE))
            .ok()
            .and_then(|t| serde_json::from_str::<GenerationTiming>(&t).ok())
            .map(|t| t.wall_time_s);
        out.push(GenerationView { summary, wall_time_s });
    }
    Ok(out)
}

pub const TABLE_HEADER: [&str; 7] = ["Gen", "Best PPL", "Mean PPL", "Std PPL", "Best MFU", "Mean MFU", "Time (s)"];

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

/// The per-generation table: one row per generation.
pub fn render_generation_table(generations: &[GenerationSummary], timing: Option<&RunTiming>) -> String {
    let time_of = |g: u32| timing.and_then(|t| t.generations.iter().find(|x| x.generation == g)).map(|t| t.wall_time_s);
    let rows: Vec<[String; 7]> = generations
        .iter()
        .map(|s| {
            [
                s.generation.to_string(),
                cell(s.best_ppl),
                cell(s.mean_ppl),
                cell(s.std_ppl),
                cell(s.best_mfu),
                cell(s.mean_mfu),
                cell(time_of(s.generation)),
            ]
        })
        .collect();
    let mut widths = TABLE_HEADER.map(str::len);
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(&mut out, &TABLE_HEADER);
    for row in &rows {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// The run summary block: baseline, final best, deltas, error statistics.
pub fn render_summary_block(report: &RunReport, timing: Option<&RunTiming>) -> String {
    let mut rows: Vec<(String, String)> = Vec::new();
    let metric = |v: Option<f64>| cell(v);
    let who = |a: Option<crate::model::AgentId>| a.map(|a| format!(" ({a})")).unwrap_or_default();
    rows.push(("Baseline PPL".into(), format!("{}{}", metric(report.baseline.map(|b| b.perplexity)), who(report.baseline.map(|b| b.agent)))));
    rows.push(("Baseline MFU".into(), metric(report.baseline.map(|b| b.mfu))));
    rows.push(("Final best PPL".into(), format!("{}{}", metric(report.final_best.map(|b| b.perplexity)), who(report.final_best.map(|b| b.agent)))));
    rows.push(("Final best MFU".into(), metric(report.final_best.map(|b| b.mfu))));
    rows.push(("PPL reduction (%)".into(), metric(report.ppl_reduction_pct)));
    rows.push(("MFU change (%)".into(), report.mfu_change_pct.map(|v| format!("{v:+.2}")).unwrap_or_else(|| "-".into())));
    rows.push(("Training instances".into(), report.errors.instances.to_string()));
    rows.push(("Total errors".into(), report.errors.errors.to_string()));
    rows.push(("Resolved errors".into(), report.errors.resolved.to_string()));
    rows.push(("Error rate (%)".into(), format!("{:.2}", report.errors.error_rate_pct)));
    rows.push(("Error resolution rate (%)".into(), format!("{:.2}", report.errors.resolution_rate_pct)));
    rows.push(("Avg time / generation (s)".into(), metric(timing.map(|t| t.mean_generation_time_s))));
    rows.push((
        "Generations".into(),
        format!("{} of {} ({:?})", report.generations_completed, report.generations_planned, report.status).to_lowercase(),
    ));
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in rows {
        writeln!(out, "{k:<width$}  {v}").unwrap();
    }
    out
}

pub fn render_report(run: &PersistedRun) -> String {
    let mut out = render_generation_table(&run.report.generations, run.timing.as_ref());
    out.push('\n');
    out.push_str(&render_summary_block(&run.report, run.timing.as_ref()));
    out
}
