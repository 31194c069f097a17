use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use colored_sse_cli::{exit, run_config_file, RunOptions, OUT_DIR_ENV};

/// Run one colored-noise SSE experiment described by a TOML config.
#[derive(Debug, Parser)]
#[command(name = "simulate", version)]
struct Args {
    /// Path of the run configuration.
    config: PathBuf,

    /// Output directory; overrides `output.directory` in the config.
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,

    /// Worker threads for ensembles (0 = all cores). Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    workers: usize,

    /// Also write the first trajectories of each ensemble.
    #[arg(long)]
    dump_trajectories: bool,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG_ERROR } else { exit::PASS };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let opts = RunOptions {
        out_dir: args.out,
        workers: args.workers,
        dump_trajectories: args.dump_trajectories,
    };
    match run_config_file(&args.config, &opts) {
        Ok(outcome) => {
            for c in &outcome.report.checks {
                println!(
                    "{} {} = {} ({})",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.condition
                );
            }
            println!("manifest: {}", outcome.manifest.path.display());
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
