use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dprgc_harness::config::parse_config;
use dprgc_harness::error::{HarnessError, Result};
use dprgc_harness::experiment::run_experiment;
use dprgc_harness::suites::{default_out, run_suite, sampled_constants};
use dprgc_harness::verify::{run_all, DEFAULT_TRIALS};

#[derive(Parser)]
#[command(name = "dprgc", version, about = "Decentralized Stiefel-manifold optimization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSV to `out_path`.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_path` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named suite: figures-synthetic, figures-mnist, consensus-rates, grid-search.
    Suite {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base config replacing the suite's shipped one.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the seeded property suites.
    Verify {
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print sampled second-order constants of the projection on St(d, r).
    EstimateConstants {
        #[arg(long, default_value_t = 10)]
        d: usize,
        #[arg(long, default_value_t = 5)]
        r: usize,
        #[arg(long, default_value_t = 8)]
        agents: usize,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &PathBuf) -> Result<dprgc_harness::ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config {
        key: "--config".into(),
        detail: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_config(&text)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out } => {
            let mut cfg = load_config(&config)?;
            if out.is_some() {
                cfg.out_path = out;
            }
            let log = run_experiment(&cfg)?;
            let last = log.last();
            println!(
                "iterations={} stop={:?} stationarity={:.6e} consensus_error={:.6e} cumulative_entries={} config_hash={}",
                last.iter,
                log.stop,
                last.diagnostics.stationarity,
                last.diagnostics.consensus_error_mean,
                log.total_entries(),
                cfg.hash()
            );
        }
        Command::Suite { name, out, config } => {
            let base = config.as_ref().map(load_config).transpose()?;
            let out = out.unwrap_or_else(|| default_out(&name));
            let entries = run_suite(&name, &out, base.as_ref())?;
            for e in &entries {
                println!("{}\t{}", out.join(&e.file).display(), e.config_hash);
            }
        }
        Command::Verify { trials, seed } => {
            let reports = run_all(trials, seed)?;
            let mut failed = 0;
            for r in &reports {
                println!("{r}");
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(HarnessError::Check(format!("{failed} of {} properties failed", reports.len())));
            }
        }
        Command::EstimateConstants { d, r, agents, samples, seed } => {
            let sc = sampled_constants(d, r, agents, samples, seed)?;
            println!("radius={} q={:.6e} m1={:.6e} m2={:.6e}", sc.radius, sc.q, sc.m1, sc.m2);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.machine_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
