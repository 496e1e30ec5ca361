use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dime_cli::commands::{self, CliError, EvalArgs, TrainArgs};
use dime_cli::config::output_root;

#[derive(Parser)]
#[command(name = "dime", version, about = "Diffusion-policy maximum-entropy RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write metrics and checkpoints.
    Train {
        /// TOML configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to the configured name under $DIME_OUT (or ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run oracle suites and print a pass/fail table.
    Verify {
        /// autodiff, bound, kl, tabular, projection or all.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Aggregate runs into IQM curves with bootstrap bands.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Output directory; defaults to `report` under the output root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a saved checkpoint with the noise-free chain.
    Eval {
        /// Run directory holding config.toml.
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint file; defaults to the run's final checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the first episode as CSV (t, state, action, reward).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let result = commands::train(&TrainArgs {
                config: config.as_deref(),
                seed,
                out: out.as_deref(),
            })?;
            if let Some(last) = result.outcome.metrics.records.last() {
                println!("step {} return {:.4} (iqm {:.4})", last.step, last.return_mean, last.return_iqm);
            }
            println!("wrote {}", result.dir.display());
        }
        Command::Verify { suite, csv } => {
            let result = commands::verify(&suite)?;
            print!("{}", result.table);
            if let Some(path) = csv {
                std::fs::write(path, &result.csv)?;
            }
            let failed = result.failed();
            if failed > 0 {
                for row in result.rows.iter().filter(|r| !r.pass) {
                    eprintln!("FAIL {}: {} (bound {})", row.name, row.value, row.bound);
                }
                return Err(CliError::Verify {
                    failed,
                    total: result.rows.len(),
                });
            }
        }
        Command::Report { runs, out } => {
            let out = out.unwrap_or_else(|| output_root().join("report"));
            let result = commands::report(&runs, &out)?;
            println!("aggregated {} run(s)", result.runs);
            for f in result.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Eval {
            run,
            checkpoint,
            episodes,
            seed,
            trace,
        } => {
            let stats = commands::eval(&EvalArgs {
                run: &run,
                checkpoint: checkpoint.as_deref(),
                episodes,
                seed,
                trace: trace.as_deref(),
            })?;
            println!("{}", serde_json::to_string(&stats).expect("finite statistics serialize"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
