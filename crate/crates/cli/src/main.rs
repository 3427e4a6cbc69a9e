//! `kvnmd`: configuration-driven runs of the KvN Langevin simulator.
//!
//! Exit status: 0 success, 1 output I/O failure, 2 configuration error,
//! 3 numerical failure.

mod config;
mod modes;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use serde_json::json;

use config::{Overrides, RunConfig};
use modes::RunError;
use output::Outputs;

#[derive(Parser, Debug)]
#[command(
    name = "kvnmd",
    version,
    about = "KvN Langevin molecular dynamics on a phase-space grid"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Run mode (overrides `mode`): relax, vdos, tst, bias-check, oracle.
    #[arg(long)]
    mode: Option<String>,
    /// Validate, print the resolved configuration as JSON and exit.
    #[arg(long)]
    check: bool,
}

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn load(cli: &Cli) -> Result<RunConfig, Vec<String>> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| vec![format!("cannot read {}: {e}", cli.config.display())])?;
    let raw = config::parse(&text).map_err(|e| vec![e])?;
    let base = cli
        .config
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_default();
    config::validate(
        raw,
        Overrides {
            mode: cli.mode.clone(),
            seed: cli.seed,
            output: cli.out.clone(),
        },
        &base,
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(errs) => {
            eprintln!("configuration error in {}:", cli.config.display());
            for e in errs {
                eprintln!("  {e}");
            }
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(l) = &cfg.langevin {
        println!(
            "s = {}, T_int = {:.6} K, sigma_H = {:.6e} a.u.",
            l.s, l.T_int_kelvin, l.params.sigma_h
        );
    }
    if cli.check {
        println!(
            "{}",
            serde_json::to_string_pretty(&cfg).expect("config serializes")
        );
        return ExitCode::SUCCESS;
    }

    let start = Instant::now();
    let mut out = match Outputs::create(&cfg.output) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("cannot create {}: {e}", cfg.output.display());
            return ExitCode::from(EXIT_IO);
        }
    };
    let (results, failure, code) = match modes::run(&cfg, &mut out) {
        Ok(r) => {
            let code = if r.failure.is_some() {
                EXIT_NUMERICAL
            } else {
                0
            };
            (r.results, r.failure, code)
        }
        Err(RunError::Config(m)) => (json!(null), Some(m), EXIT_CONFIG),
        Err(RunError::Numerical(m)) => (json!(null), Some(m), EXIT_NUMERICAL),
        Err(RunError::Io(m)) => (json!(null), Some(m), EXIT_IO),
    };
    if let Some(f) = &failure {
        eprintln!("run failed: {f}");
    }
    let manifest = json!({
        "program": "kvnmd",
        "versions": { "kvnmd": env!("CARGO_PKG_VERSION"), "kvn-langevin": kvn_langevin::VERSION },
        "config_file": cli.config,
        "config": cfg,
        "results": results,
        "failure": failure,
        "exit_code": code,
        "wall_time_s": start.elapsed().as_secs_f64(),
        "outputs": out.files(),
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    if let Err(e) = std::fs::write(out.dir().join("manifest.json"), text) {
        eprintln!("cannot write manifest: {e}");
        return ExitCode::from(EXIT_IO);
    }
    ExitCode::from(code)
}
