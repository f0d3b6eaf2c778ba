use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedlora::experiment::{self, ExperimentConfig};
use fedlora::params::Rng;
use fedlora::theory;
use fedlora::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fedlora",
    version,
    about = "Federated LoRA fine-tuning with trace-optimal local/federated merging"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a method / upload / accuracy table from summary.json files.
    Tradeoff {
        /// Glob matching summary.json files.
        #[arg(long)]
        inputs: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the excess-loss bound on random synthetic scenarios.
    Theory {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config).map_err(|e| match e {
                Error::Io(io) => Error::Config(format!("{}: {io}", config.display())),
                other => other,
            })?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let res = experiment::run_experiment(&cfg)?;
            for m in &res.summary.methods {
                println!(
                    "{:<20} upload {:>12} B  mean acc {:.4}",
                    m.method, m.upload_bytes, m.mean_acc
                );
            }
            Ok(())
        }
        Command::Tradeoff { inputs, out } => {
            let paths: Vec<PathBuf> = glob::glob(&inputs)
                .map_err(|e| Error::Config(format!("bad glob `{inputs}`: {e}")))?
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Io(e.into()))?;
            if paths.is_empty() {
                return Err(Error::Data(format!("no summaries match `{inputs}`")));
            }
            let runs = paths.iter().map(experiment::load_summary).collect::<Result<Vec<_>>>()?;
            let table = experiment::report_tradeoff(&runs)?;
            table.write(&out)?;
            print!("{}", table.render());
            Ok(())
        }
        Command::Theory {
            trials,
            draws,
            seed,
            out,
        } => {
            if trials == 0 {
                return Err(Error::Config("--trials must be at least 1".into()));
            }
            let report = theory::run_suite(trials, draws, 10_000, &Rng::new(seed))?;
            std::fs::create_dir_all(&out)?;
            report.to_csv().write(out.join("theory.csv"))?;
            let failed = report.checks.iter().filter(|(_, c)| !c.holds).count();
            println!(
                "{} checks, {failed} failed; ordering failures {}; trace Cauchy-Schwarz {}/{}",
                report.checks.len(),
                report.ordering_failures,
                report.cs_passes,
                report.cs_trials
            );
            if report.all_hold() {
                Ok(())
            } else {
                Err(Error::Invariant("excess-loss bound violated".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
