use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use riskflow::config::{load_config, ExperimentConfig, ExperimentKind, Overrides};
use riskflow::experiment::{run, threads_from_env};

/// Run a risk-sensitive FBSDE experiment and write result.json plus CSVs.
///
/// Exit status: 0 when every verdict passes, 2 when an optimality verdict or
/// property check fails, 1 on errors.
#[derive(Debug, Parser)]
#[command(name = "riskflow", version)]
struct Args {
    /// TOML configuration file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// cashflow, generic_fbsde or property_suite.
    #[arg(long)]
    experiment: Option<ExperimentKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Time steps N.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the simulated trajectories to paths.csv.
    #[arg(long)]
    dump_paths: bool,
    /// Only print errors.
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let level = if args.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&args) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            let provenance = err
                .downcast_ref::<riskflow::Error>()
                .map(|e| e.provenance())
                .unwrap_or("cli");
            eprintln!("error [{provenance}]: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn execute(args: &Args) -> anyhow::Result<u8> {
    if let Some(n) = threads_from_env()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let mut config = match &args.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    config.apply(&Overrides {
        experiment: args.experiment,
        seed: args.seed,
        paths: args.paths,
        steps: args.steps,
        theta: args.theta,
        out: args.out.clone(),
        dump_paths: args.dump_paths,
    })?;
    log::info!("running {:?} with {} paths, {} steps", config.experiment, config.mc.n_paths, config.grid.steps);
    let output = run(&config)?;
    let written = output.write(&config.output.dir)?;
    if !args.quiet {
        for path in &written {
            println!("{}", path.display());
        }
        println!("determinism hash {}", output.hash);
        if !output.passed {
            println!("one or more verdicts failed (see result.json)");
        }
    }
    Ok(output.exit_code() as u8)
}
