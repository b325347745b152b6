use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use codevolve::chunker::{chunk_source, render_table};
use codevolve::config::{load_config, MAX_SEED};
use codevolve::evolution::report::{load_run, render_report};
use codevolve::evolution::RunStatus;
use codevolve::service::{serve, TOKEN_ENV};
use codevolve::session::Session;

/// Evolve a trainee program by LLM-driven mutation and fitness selection.
#[derive(Debug, Parser)]
#[command(name = "codevolve", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `rng_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Serve the HTTP API on this address while the run is in progress.
        #[arg(long, value_name = "ADDR")]
        serve: Option<String>,
        /// Keep serving after the run ends, until interrupted.
        #[arg(long, requires = "serve")]
        keep_serving: bool,
        /// Run without mutation memory in the prompts.
        #[arg(long)]
        no_memory: bool,
        /// Overrides `run_dir`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Overrides `worker_count`.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print the report of a finished run.
    Report {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Print the chunk table of a Python source file.
    Chunks { file: PathBuf },
}

const EXIT_FAILURE: u8 = 1;
const EXIT_EXTINCT: u8 = 2;

fn fail(message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(EXIT_FAILURE)
}

#[allow(clippy::too_many_arguments)]
fn run(
    config: PathBuf,
    seed: Option<u64>,
    addr: Option<String>,
    keep_serving: bool,
    no_memory: bool,
    run_dir: Option<PathBuf>,
    workers: Option<usize>,
) -> ExitCode {
    let mut cfg = match load_config(&config) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if let Some(seed) = seed {
        if seed > MAX_SEED {
            return fail(format!("--seed {seed} exceeds {MAX_SEED}"));
        }
        cfg.rng_seed = seed;
    }
    if no_memory {
        cfg.memory_enabled = false;
    }
    if let Some(dir) = run_dir {
        cfg.run_dir = std::path::absolute(&dir).unwrap_or(dir);
    }
    if let Some(w) = workers {
        if w == 0 {
            return fail("--workers must be at least 1");
        }
        cfg.worker_count = w;
    }
    let session = match Session::open(cfg) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let service = match addr {
        Some(addr) => match serve(session.service_state(std::env::var(TOKEN_ENV).ok()), &addr) {
            Ok(handle) => {
                eprintln!("serving on {}", handle.base_url());
                Some(handle)
            }
            Err(e) => return fail(e),
        },
        None => None,
    };
    let report = match session.run() {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    match codevolve::evolution::report::load_run(session.sandbox.root()) {
        Ok(run) => print!("{}", render_report(&run)),
        Err(e) => log::warn!("cannot reload the report: {e}"),
    }
    if keep_serving && service.is_some() {
        eprintln!("run finished; still serving (interrupt to stop)");
        loop {
            std::thread::park();
        }
    }
    drop(service);
    if report.status == RunStatus::Extinct {
        ExitCode::from(EXIT_EXTINCT)
    } else {
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config, seed, serve, keep_serving, no_memory, run_dir, workers } => {
            run(config, seed, serve, keep_serving, no_memory, run_dir, workers)
        }
        Command::Report { run_dir, format } => match load_run(&run_dir) {
            Ok(run) => {
                match format {
                    Format::Table => print!("{}", render_report(&run)),
                    Format::Json => print!("{}", run.raw_report),
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Chunks { file } => {
            let bytes = match std::fs::read(&file) {
                Ok(b) => b,
                Err(e) => return fail(format!("{}: {e}", file.display())),
            };
            match chunk_source(&bytes, &file) {
                Ok(chunks) => {
                    print!("{}", render_table(&chunks));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
    }
}
