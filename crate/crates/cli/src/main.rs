use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stbem::checks;
use stbem::sim::{parse_baselines, parse_snr_grid, run_experiment, write_rows, write_trace, RunConfig, RunOutput, Scenario};
use stbem::Error;

#[derive(Parser)]
#[command(name = "stbem", version, about = "Spatial-temporal BEM channel tracking simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write per-block and aggregate rows.
    Simulate(RunArgs),
    /// Run a scenario over an SNR grid and write one aggregate row per (snr, method, trial).
    Sweep(RunArgs),
    /// Like `simulate`, plus per-block, per-user diagnostics in trace.csv.
    Trace(RunArgs),
    /// Run the built-in numerical checks.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with [system] and [experiment] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    /// SNR list in dB: `10`, `0,5,10` or `start:step:stop`.
    #[arg(long, allow_hyphen_values = true)]
    snr: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "stbem-out")]
    out: PathBuf,
    /// Comma-separated list, e.g. `aging,fixed_upsilon(6)`.
    #[arg(long)]
    baselines: Option<String>,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn resolve(args: &RunArgs) -> stbem::Result<RunConfig> {
    let mut rc = match &args.config {
        Some(path) => RunConfig::from_toml(&fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &args.scenario {
        let sc: Scenario = s.parse()?;
        if sc != rc.experiment.scenario && args.config.is_some() {
            rc.experiment.baselines.clear();
        }
        rc.experiment.scenario = sc;
    }
    if let Some(s) = &args.snr {
        rc.experiment.snr_grid = parse_snr_grid(s)?;
    }
    if let Some(t) = args.trials {
        rc.experiment.n_trials = t;
    }
    if let Some(b) = args.blocks {
        rc.experiment.n_blocks = b;
    }
    if let Some(seed) = args.seed {
        rc.system.seed = seed;
    }
    if let Some(b) = &args.baselines {
        rc.experiment.baselines = parse_baselines(b)?;
    }
    Ok(rc)
}

fn write_outputs(out: &Path, run: &RunOutput, trace: bool) -> stbem::Result<()> {
    fs::create_dir_all(out)?;
    write_rows(fs::File::create(out.join("metrics.csv"))?, &run.rows)?;
    fs::write(out.join("manifest.toml"), run.manifest.to_toml()?)?;
    if trace {
        write_trace(fs::File::create(out.join("trace.csv"))?, &run.trace)?;
    }
    Ok(())
}

fn run(args: &RunArgs, aggregate_only: bool, trace: bool) -> Result<usize, (u8, String)> {
    let classify = |e: Error| (if e.is_config() { EXIT_CONFIG } else { EXIT_NUMERICAL }, e.to_string());
    let mut rc = resolve(args).map_err(classify)?;
    if aggregate_only {
        rc.experiment.per_block_rows = false;
    }
    let result = run_experiment(&rc.experiment, &rc.system).map_err(classify)?;
    write_outputs(&args.out, &result, trace).map_err(|e| (EXIT_NUMERICAL, e.to_string()))?;
    for t in &result.manifest.trials {
        if let Some(e) = &t.error {
            eprintln!("trial {}: {e}", t.trial);
        }
    }
    Ok(result.failed_trials())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate(a) => run(a, false, false),
        Command::Sweep(a) => run(a, true, false),
        Command::Trace(a) => run(a, false, true),
        Command::Selftest => {
            let results = checks::selftest();
            for c in &results {
                println!("{}", c.line());
            }
            Ok(results.iter().filter(|c| !c.passed).count())
        }
    };
    match outcome {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} failed");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
