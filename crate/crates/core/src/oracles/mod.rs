//! Independent reference computations backing the `verify` suites.
//!
//! Nothing here reuses the kernels it checks: densities, schedules and
//! projections are re-derived from their textbook formulas.

pub mod autodiff;
pub mod boltzmann;
pub mod gaussian;
pub mod path_kl;
pub mod projection;
pub mod tabular;

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

/// One line of a verification table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub value: f64,
    /// Human-readable acceptance condition, e.g. `<= 1e-4`.
    pub bound: String,
    pub pass: bool,
}

impl CheckRow {
    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: format!("<= {limit:e}"),
            pass: value <= limit,
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: format!(">= {limit:e}"),
            pass: value >= limit,
        }
    }

    pub fn verdict(&self) -> &'static str {
        if self.pass {
            "pass"
        } else {
            "FAIL"
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Autodiff,
    Bound,
    Kl,
    Tabular,
    Projection,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 6] = ["autodiff", "bound", "kl", "tabular", "projection", "all"];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "autodiff" => Self::Autodiff,
            "bound" => Self::Bound,
            "kl" => Self::Kl,
            "tabular" => Self::Tabular,
            "projection" => Self::Projection,
            "all" => Self::All,
            other => {
                return Err(Error::Oracle(format!(
                    "unknown suite `{other}`; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [Self::Autodiff, Self::Bound, Self::Kl, Self::Tabular, Self::Projection, Self::All]
            .iter()
            .position(|s| s == self)
            .unwrap();
        f.write_str(Self::NAMES[i])
    }
}

pub fn run_suite(suite: Suite) -> Result<Vec<CheckRow>> {
    match suite {
        Suite::Autodiff => autodiff::suite(100),
        Suite::Bound => gaussian::suite(),
        Suite::Kl => path_kl::suite(20),
        Suite::Tabular => tabular::suite(50),
        Suite::Projection => projection::suite(10_000),
        Suite::All => {
            let mut rows = Vec::new();
            for s in [Suite::Autodiff, Suite::Bound, Suite::Kl, Suite::Tabular, Suite::Projection] {
                rows.extend(run_suite(s)?);
            }
            Ok(rows)
        }
    }
}

/// Aligned text table.
pub fn format_table(rows: &[CheckRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<width$}  {:>14}  {:<12}  verdict\n", "name", "value", "bound");
    for r in rows {
        out.push_str(&format!("{:<width$}  {:>14.6e}  {:<12}  {}\n", r.name, r.value, r.bound, r.verdict()));
    }
    out
}

/// CSV with header `name,value,bound,verdict`.
pub fn format_csv(rows: &[CheckRow]) -> String {
    let mut out = String::from("name,value,bound,verdict\n");
    for r in rows {
        out.push_str(&format!("{},{:e},{},{}\n", r.name, r.value, r.bound, r.verdict()));
    }
    out
}
