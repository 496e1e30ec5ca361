//! Subcommand bodies, callable without going through argument parsing.

use std::fs;
use std::path::{Path, PathBuf};

use dime_core::experience::{rollout, write_trace};
use dime_core::nn::checkpoint;
use dime_core::oracles::{format_csv, format_table, run_suite};
use dime_core::{evaluate, make, train_with, Agent, CheckRow, Error, EvalStats, Suite, TrainOutcome};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{output_root, resolve_run_dir, ConfigError, ConfigFile};
use crate::outputs::{RunWriter, ABORT, CONFIG, FINAL_CHECKPOINT};
use crate::report::{aggregate, aggregate_csv, load_run, METRICS};
use crate::svg::line_chart;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{failed} of {total} checks failed")]
    Verify { failed: usize, total: usize },
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for bad input, 3 for a training abort, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Usage(_) => 2,
            Self::Core(Error::Aborted(_)) => 3,
            Self::Core(Error::UnknownEnvironment(_)) => 2,
            _ => 1,
        }
    }
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub seed: Option<u64>,
    pub out: Option<&'a Path>,
}

pub struct TrainResult {
    pub dir: PathBuf,
    pub outcome: TrainOutcome,
}

pub fn load_config(path: Option<&Path>) -> Result<ConfigFile, CliError> {
    Ok(match path {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    })
}

/// Trains and writes the run directory. On abort the snapshot is saved as
/// `abort.json` before the error is returned.
pub fn train(args: &TrainArgs<'_>) -> Result<TrainResult, CliError> {
    let mut config = load_config(args.config)?;
    if let Some(seed) = args.seed {
        config.trainer.seed = seed;
    }
    let env = make(&config.trainer.env)?;
    let dir = resolve_run_dir(args.out, &config, &output_root());
    let mut writer = RunWriter::create(&dir, &config)?;
    match train_with(&config.trainer, env, &mut writer) {
        Ok(outcome) => {
            writer.save_checkpoint(FINAL_CHECKPOINT, &outcome.agent)?;
            Ok(TrainResult { dir, outcome })
        }
        Err(Error::Aborted(snapshot)) => {
            fs::write(dir.join(ABORT), serde_json::to_string_pretty(&snapshot).map_err(Error::from)?)?;
            Err(Error::Aborted(snapshot).into())
        }
        Err(e) => Err(e.into()),
    }
}

pub struct VerifyResult {
    pub rows: Vec<CheckRow>,
    pub table: String,
    pub csv: String,
}

impl VerifyResult {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| !r.pass).count()
    }
}

pub fn verify(suite: &str) -> Result<VerifyResult, CliError> {
    let suite: Suite = suite.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let rows = run_suite(suite)?;
    Ok(VerifyResult {
        table: format_table(&rows),
        csv: format_csv(&rows),
        rows,
    })
}

pub struct ReportResult {
    pub runs: usize,
    pub files: Vec<PathBuf>,
}

/// Writes `aggregate.csv` and one SVG per metric with data into `out`.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<ReportResult, CliError> {
    let series: Vec<_> = runs.iter().filter_map(|d| load_run(d)).collect();
    if series.is_empty() {
        return Err(CliError::Usage(format!("no parsable runs among {} director{}", runs.len(), if runs.len() == 1 { "y" } else { "ies" })));
    }
    fs::create_dir_all(out)?;
    let curves: Vec<_> = METRICS.iter().map(|m| (m, aggregate(&series, m))).collect();
    let mut files = Vec::new();
    let csv = out.join("aggregate.csv");
    fs::write(&csv, aggregate_csv(&curves))?;
    files.push(csv);
    for (metric, points) in &curves {
        if points.is_empty() {
            continue;
        }
        let path = out.join(format!("{}.svg", metric.name));
        let title = format!("{} over {} run{}", metric.label, series.len(), if series.len() == 1 { "" } else { "s" });
        fs::write(&path, line_chart(&title, "environment steps", metric.label, points))?;
        files.push(path);
    }
    Ok(ReportResult {
        runs: series.len(),
        files,
    })
}

pub struct EvalArgs<'a> {
    pub run: &'a Path,
    pub checkpoint: Option<&'a Path>,
    pub episodes: usize,
    pub seed: u64,
    pub trace: Option<&'a Path>,
}

/// Rebuilds the agent from a run directory and checkpoint.
pub fn load_agent(run: &Path, checkpoint_path: Option<&Path>) -> Result<Agent, CliError> {
    let config = ConfigFile::load(&run.join(CONFIG))?;
    let spec = make(&config.trainer.env)?.spec();
    let mut agent = Agent::new(config.trainer.clone(), spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    let path = checkpoint_path.map_or_else(|| run.join(FINAL_CHECKPOINT), Path::to_path_buf);
    agent.load_entries(&checkpoint::load(&path)?)?;
    Ok(agent)
}

/// Deterministic evaluation of a saved agent; optionally exports the first
/// episode as a CSV trace.
pub fn eval(args: &EvalArgs<'_>) -> Result<EvalStats, CliError> {
    let agent = load_agent(args.run, args.checkpoint)?;
    let mut env = make(&agent.spec.id)?;
    let stats = evaluate(env.as_mut(), args.episodes, args.seed, |o| agent.act_deterministic(o))?;
    if let Some(path) = args.trace {
        let rows = rollout(env.as_mut(), args.seed, |o| agent.act_deterministic(o))?;
        write_trace(fs::File::create(path)?, &rows)?;
    }
    Ok(stats)
}
