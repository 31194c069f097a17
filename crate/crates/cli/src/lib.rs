//! Batch front end for colored-sse: parse a run configuration, run one
//! experiment, write result tables and a manifest.

pub mod config;
pub mod experiments;
pub mod output;

use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use colored_sse::Execution;

pub use config::{parse_config, ConfigError, Experiment, RunConfig, Validated};
pub use output::{Check, Report, RunManifest};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SIMULATE_OUT_DIR";

pub mod exit {
    pub const PASS: i32 = 0;
    pub const CHECK_FAILED: i32 = 1;
    pub const CONFIG_ERROR: i32 = 2;
    pub const NUMERICAL_FAILURE: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("numerical failure: {0}")]
    Numerical(#[from] colored_sse::Error),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Io(_) => exit::CONFIG_ERROR,
            RunError::Numerical(e) => match e {
                // argument errors from the library are configuration problems
                colored_sse::Error::InvalidArgument(_)
                | colored_sse::Error::DimensionMismatch { .. }
                | colored_sse::Error::NotSquare { .. }
                | colored_sse::Error::NotHermitian { .. }
                | colored_sse::Error::NotSkewAdjoint { .. }
                | colored_sse::Error::DriftConditionViolated { .. }
                | colored_sse::Error::NotNormalized { .. } => exit::CONFIG_ERROR,
                _ => exit::NUMERICAL_FAILURE,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// `0` uses every available core, `1` runs sequentially.
    pub workers: usize,
    pub dump_trajectories: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out_dir: None,
            workers: 1,
            dump_trajectories: false,
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: Report,
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.report.passed() {
            exit::PASS
        } else {
            exit::CHECK_FAILED
        }
    }
}

/// Output directory: explicit option, then the config's `output.directory`,
/// then [`config::DEFAULT_OUTPUT_DIR`].
pub fn resolve_out_dir(cfg: &Validated, opts: &RunOptions) -> PathBuf {
    opts.out_dir
        .clone()
        .or_else(|| cfg.raw.output.directory.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(config::DEFAULT_OUTPUT_DIR))
}

pub fn run_experiment(cfg: &Validated, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    let start = Instant::now();
    let ctx = experiments::Context {
        cfg,
        exec: Execution::with_workers(opts.workers),
        dump_trajectories: opts.dump_trajectories,
    };
    let report = experiments::run(&ctx)?;
    let out_dir = resolve_out_dir(cfg, opts);
    let manifest = output::write_run(
        &out_dir,
        &report,
        &output::RunInfo {
            config: &cfg.raw,
            workers: opts.workers,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(RunOutcome {
        report,
        manifest,
        out_dir,
    })
}

pub fn run_config_file(path: &Path, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        RunError::Config(ConfigError {
            path: String::new(),
            message: format!("cannot read {}: {e}", path.display()),
        })
    })?;
    let cfg = parse_config(&text)?;
    run_experiment(&cfg, opts)
}
