//! Command-line runner for the dynamic-capacity experiments.
//!
//! Exit status: 0 on success, 1 for configuration errors (nothing trained),
//! 2 for failures during a run (a `.failed` marker is left in the output
//! directory).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use dyncap::experiments::{self, ConfigFile, ExperimentConfig, ExperimentKind, FAILED_MARKER};

#[derive(Parser, Debug)]
#[command(name = "dyncap", version, about = "Train noise-gated dynamic-capacity layers")]
struct Args {
    /// filterbank, beta_sweep or acl_chain
    #[arg(long)]
    experiment: Option<String>,
    /// TOML file of settings; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Penalty weight (single runs)
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long = "lambda-min")]
    lambda_min: Option<f64>,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    /// Reuse a non-empty output directory
    #[arg(long)]
    overwrite: bool,
}

const THREADS_VAR: &str = "DYNCAP_THREADS";

fn configure(args: &Args) -> Result<(ExperimentConfig, Option<usize>), String> {
    let mut file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            ConfigFile::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => ConfigFile::default(),
    };
    if let Some(name) = &args.experiment {
        file.experiment = Some(name.parse::<ExperimentKind>().map_err(|e| e.to_string())?);
    }
    file.seed = args.seed.or(file.seed);
    file.beta = args.beta.or(file.beta);
    file.steps = args.steps.or(file.steps);
    file.lambda_min = args.lambda_min.or(file.lambda_min);
    file.out_dir = args.out_dir.clone().or(file.out_dir);
    let cfg = ExperimentConfig::resolve(&file).map_err(|e| e.to_string())?;

    let threads = match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Some(n),
            _ => return Err(format!("{THREADS_VAR}={v} is not a positive integer")),
        },
        Err(_) => None,
    };
    experiments::prepare_out_dir(&cfg.out_dir, args.overwrite).map_err(|e| e.to_string())?;
    Ok((cfg, threads))
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let (cfg, threads) = match configure(&args) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("config error: {msg}");
            return ExitCode::from(1);
        }
    };
    match experiments::run(&cfg, threads) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("run failed: {e}");
            let marker = cfg.out_dir.join(FAILED_MARKER);
            if let Err(io) = std::fs::write(&marker, format!("{e}\n")) {
                eprintln!("could not write {}: {io}", marker.display());
            }
            ExitCode::from(2)
        }
    }
}
