use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use bellshadow::config::{parse_config, OutputFormat, ScenarioConfig};
use bellshadow::io::SHADOWMAP_SCHEMA;
use bellshadow::scenario::{run_scenario, Verb};

/// Bell violation shadows of satellite entanglement links.
#[derive(Parser)]
#[command(name = "bellshadow", version)]
struct Cli {
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, env = "BELLSHADOW_WORKERS", default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Shadow maps at every configured epoch.
    Shadow(RunArgs),
    /// Pass time series between `fixed_gs` and `station_b`.
    Timeseries(RunArgs),
    /// Finite-statistics CHSH tables.
    Analytic(RunArgs),
    /// Shadow size along the `[sweep]` parameter ladder.
    Sweep(RunArgs),
    /// Print the JSON Schema of the GeoJSON output.
    Schema,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Geojson,
    Csv,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the map format.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

fn load(args: &RunArgs) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut cfg = parse_config(&text).with_context(|| format!("in {}", args.config.display()))?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = &args.out {
        cfg.output.dir = d.clone();
    }
    if let Some(f) = args.format {
        cfg.output.format = match f {
            Format::Geojson => OutputFormat::Geojson,
            Format::Csv => OutputFormat::Csv,
        };
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let (verb, args) = match &cli.command {
        Command::Shadow(a) => (Verb::Shadow, a),
        Command::Timeseries(a) => (Verb::Timeseries, a),
        Command::Analytic(a) => (Verb::Analytic, a),
        Command::Sweep(a) => (Verb::Sweep, a),
        Command::Schema => {
            print!("{SHADOWMAP_SCHEMA}");
            return Ok(());
        }
    };
    let cfg = load(args)?;
    let report = run_scenario(&cfg, verb, cli.workers)?;
    for f in &report.outputs {
        println!("{}  {}", f.sha256, f.path.display());
    }
    println!("manifest {}", report.manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
