//! Aggregation of several runs into IQM curves with bootstrap bands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dime_core::trainer::stats::{iqm, stratified_bootstrap};
use dime_core::EvalRecord;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ConfigFile;
use crate::outputs::{read_metrics, CONFIG, METRICS_JSONL};

pub const RESAMPLES: usize = 2000;
pub const LEVEL: f64 = 0.95;
const BOOTSTRAP_SEED: u64 = 0x1c0de;

/// One run's records plus the environment it was trained on, which is the
/// bootstrap stratum.
#[derive(Debug, Clone)]
pub struct RunSeries {
    pub dir: PathBuf,
    pub env: String,
    pub records: Vec<EvalRecord>,
}

/// `None` if the directory holds no readable records.
pub fn load_run(dir: &Path) -> Option<RunSeries> {
    let records = read_metrics(&dir.join(METRICS_JSONL)).ok()?;
    if records.is_empty() {
        return None;
    }
    let env = ConfigFile::load(&dir.join(CONFIG))
        .map(|c| c.trainer.env)
        .unwrap_or_else(|_| "unknown".into());
    Some(RunSeries {
        dir: dir.to_path_buf(),
        env,
        records,
    })
}

pub struct Metric {
    pub name: &'static str,
    pub label: &'static str,
    pub value: fn(&EvalRecord) -> Option<f64>,
}

pub const METRICS: [Metric; 5] = [
    Metric {
        name: "return",
        label: "IQM return",
        value: |r| Some(r.return_mean),
    },
    Metric {
        name: "bound",
        label: "entropy bound",
        value: |r| r.bound_mean,
    },
    Metric {
        name: "alpha",
        label: "temperature",
        value: |r| Some(r.alpha),
    },
    Metric {
        name: "critic_loss",
        label: "critic loss",
        value: |r| r.critic_loss,
    },
    Metric {
        name: "policy_loss",
        label: "policy loss",
        value: |r| r.policy_loss,
    },
];

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub step: usize,
    pub runs: usize,
    pub iqm: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// IQM across runs at every step any run recorded, with a percentile
/// bootstrap that resamples runs within each environment.
pub fn aggregate(runs: &[RunSeries], metric: &Metric) -> Vec<Point> {
    let mut by_step: BTreeMap<usize, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for run in runs {
        for r in &run.records {
            if let Some(v) = (metric.value)(r).filter(|v| v.is_finite()) {
                by_step.entry(r.step).or_default().entry(&run.env).or_default().push(v);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
    by_step
        .into_iter()
        .map(|(step, strata)| {
            let strata: Vec<Vec<f64>> = strata.into_values().collect();
            let pooled: Vec<f64> = strata.concat();
            let (ci_low, ci_high) = stratified_bootstrap(&strata, iqm, RESAMPLES, LEVEL, &mut rng);
            Point {
                step,
                runs: pooled.len(),
                iqm: iqm(&pooled),
                ci_low,
                ci_high,
            }
        })
        .collect()
}

pub fn aggregate_csv(curves: &[(&Metric, Vec<Point>)]) -> String {
    let mut out = String::from("metric,step,runs,iqm,ci_low,ci_high\n");
    for (metric, points) in curves {
        for p in points {
            out.push_str(&format!("{},{},{},{},{},{}\n", metric.name, p.step, p.runs, p.iqm, p.ci_low, p.ci_high));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(env: &str, values: &[(usize, f64)]) -> RunSeries {
        RunSeries {
            dir: PathBuf::new(),
            env: env.into(),
            records: values
                .iter()
                .map(|&(step, v)| EvalRecord {
                    step,
                    return_mean: v,
                    return_iqm: v,
                    ci_low: v,
                    ci_high: v,
                    bound_mean: None,
                    alpha: 1.0,
                    critic_loss: None,
                    policy_loss: None,
                    critic_updates: 0,
                    actor_updates: 0,
                    beta_scale: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn hand_computed_quartiles() {
        // step 10: {0, 1, 2, 3} -> middle {1, 2}; step 20: {4, 8, 100, -50} -> {4, 8}
        let runs: Vec<RunSeries> = [(0.0, 4.0), (1.0, 8.0), (2.0, 100.0), (3.0, -50.0)]
            .iter()
            .map(|&(a, b)| series("e", &[(10, a), (20, b)]))
            .collect();
        let pts = aggregate(&runs, &METRICS[0]);
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0].iqm, 1.5);
        assert_eq!(pts[1].iqm, 6.0);
        assert_eq!(pts[0].runs, 4);
    }

    #[test]
    fn single_run_band_collapses() {
        let pts = aggregate(&[series("e", &[(1, 3.5), (2, -1.0)])], &METRICS[0]);
        for p in pts {
            assert_eq!((p.ci_low, p.ci_high), (p.iqm, p.iqm));
        }
    }

    #[test]
    fn identical_runs_have_zero_width() {
        let runs: Vec<RunSeries> = (0..5).map(|_| series("e", &[(1, 2.0), (2, 7.0)])).collect();
        for p in aggregate(&runs, &METRICS[0]) {
            assert_eq!(p.ci_low, p.ci_high);
            assert_eq!(p.ci_low, p.iqm);
        }
    }

    #[test]
    fn strata_keep_environment_counts() {
        // With one run per environment, every resample reproduces the data.
        let runs = vec![series("a", &[(1, 0.0)]), series("b", &[(1, 10.0)])];
        let p = &aggregate(&runs, &METRICS[0])[0];
        assert_eq!((p.ci_low, p.ci_high), (5.0, 5.0));
    }

    #[test]
    fn missing_values_skipped() {
        let pts = aggregate(&[series("e", &[(1, 1.0)])], &METRICS[1]);
        assert!(pts.is_empty());
    }
}
