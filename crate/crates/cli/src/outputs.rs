//! Files written into a run directory.
//!
//! `metrics.jsonl` and `metrics.csv` depend only on the configuration, so two
//! runs with the same seed produce identical bytes. Wall-clock time goes to
//! `timing.csv`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use dime_core::nn::checkpoint;
use dime_core::{Agent, EvalRecord, Observer};

use crate::config::ConfigFile;

pub const CONFIG: &str = "config.toml";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const TIMING_CSV: &str = "timing.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.bin";
pub const ABORT: &str = "abort.json";

pub const CSV_HEADER: &str =
    "step,return_mean,return_iqm,ci_low,ci_high,bound_mean,alpha,critic_loss,policy_loss,critic_updates,actor_updates,beta_scale";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn csv_row(r: &EvalRecord) -> String {
    let beta: Vec<String> = r.beta_scale.iter().map(|b| b.to_string()).collect();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.step,
        r.return_mean,
        r.return_iqm,
        r.ci_low,
        r.ci_high,
        opt(r.bound_mean),
        r.alpha,
        opt(r.critic_loss),
        opt(r.policy_loss),
        r.critic_updates,
        r.actor_updates,
        beta.join(";")
    )
}

pub fn checkpoint_name(step: usize) -> String {
    format!("checkpoint-{step:09}.bin")
}

/// Streams records as they arrive; every line is flushed, so an interrupted
/// run still leaves complete lines behind.
pub struct RunWriter {
    dir: PathBuf,
    jsonl: File,
    csv: File,
    timing: File,
}

impl RunWriter {
    /// Creates the directory, writes the resolved configuration and truncates
    /// any previous metrics.
    pub fn create(dir: &Path, config: &ConfigFile) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG), config.to_toml())?;
        let _ = fs::remove_file(dir.join(ABORT));
        let mut csv = File::create(dir.join(METRICS_CSV))?;
        writeln!(csv, "{CSV_HEADER}")?;
        let mut timing = File::create(dir.join(TIMING_CSV))?;
        writeln!(timing, "step,wall_seconds")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            jsonl: File::create(dir.join(METRICS_JSONL))?,
            csv,
            timing,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn save_checkpoint(&self, name: &str, agent: &Agent) -> dime_core::Result<()> {
        checkpoint::save(&self.dir.join(name), &agent.to_entries())
    }
}

impl Observer for RunWriter {
    fn on_eval(&mut self, record: &EvalRecord, wall_seconds: f64) -> dime_core::Result<()> {
        writeln!(self.jsonl, "{}", serde_json::to_string(record)?)?;
        self.jsonl.flush()?;
        writeln!(self.csv, "{}", csv_row(record))?;
        self.csv.flush()?;
        writeln!(self.timing, "{},{:.6}", record.step, wall_seconds)?;
        self.timing.flush()?;
        Ok(())
    }

    fn on_checkpoint(&mut self, step: usize, agent: &Agent) -> dime_core::Result<()> {
        self.save_checkpoint(&checkpoint_name(step), agent)
    }
}

/// Reads every complete record; a torn final line is ignored.
pub fn read_metrics(path: &Path) -> std::io::Result<Vec<EvalRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            Err(_) => break,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: usize) -> EvalRecord {
        EvalRecord {
            step,
            return_mean: -1.5,
            return_iqm: -1.25,
            ci_low: -2.0,
            ci_high: -1.0,
            bound_mean: None,
            alpha: 0.5,
            critic_loss: Some(0.25),
            policy_loss: None,
            critic_updates: 10,
            actor_updates: 5,
            beta_scale: vec![0.5, 1.0],
        }
    }

    #[test]
    fn csv_row_leaves_missing_values_empty() {
        assert_eq!(csv_row(&record(3)), "3,-1.5,-1.25,-2,-1,,0.5,0.25,,10,5,0.5;1");
        assert_eq!(CSV_HEADER.split(',').count(), csv_row(&record(3)).split(',').count());
    }

    #[test]
    fn torn_jsonl_tail_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = RunWriter::create(dir.path(), &ConfigFile::default()).unwrap();
        w.on_eval(&record(1), 0.1).unwrap();
        w.on_eval(&record(2), 0.2).unwrap();
        let path = dir.path().join(METRICS_JSONL);
        let mut f = fs::OpenOptions::new().append(true).open(&path).unwrap();
        write!(f, "{{\"step\": 3, \"return_me").unwrap();
        let got = read_metrics(&path).unwrap();
        assert_eq!(got, vec![record(1), record(2)]);
    }
}
