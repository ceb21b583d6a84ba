//! One-axis parameter sweeps. Every point reuses the base seeds, so points
//! differ only in the swept value.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::config::ConfigArgs;
use crate::harness::metrics::write_metrics;
use crate::orchestrator::run_experiment;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Clients,
    SampleRatio,
    Beta,
    Mode,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Clients => "N",
            SweepAxis::SampleRatio => "C",
            SweepAxis::Beta => "beta",
            SweepAxis::Mode => "mode",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &ConfigArgs, value: &str) -> Result<ConfigArgs> {
        let bad = |what: &str| Error::key(self.name(), format!("`{value}` is not {what}"));
        let mut out = base.clone();
        match self {
            SweepAxis::Clients => out.n_clients = Some(value.parse().map_err(|_| bad("an integer"))?),
            SweepAxis::SampleRatio => out.sample_ratio = Some(value.parse().map_err(|_| bad("a number"))?),
            SweepAxis::Beta => out.beta = Some(value.parse().map_err(|_| bad("a number"))?),
            SweepAxis::Mode => out.mode = Some(value.to_string()),
        }
        Ok(out)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" | "n" | "n_clients" => Ok(SweepAxis::Clients),
            "C" | "c" | "sample_ratio" => Ok(SweepAxis::SampleRatio),
            "beta" => Ok(SweepAxis::Beta),
            "mode" => Ok(SweepAxis::Mode),
            _ => Err(Error::key("axis", format!("unknown sweep axis `{s}` (N, C, beta, mode)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub seed: u64,
    pub path: PathBuf,
    pub best_student_acc: f64,
    pub best_teacher_acc: f64,
}

/// Relative output path of one sweep point.
pub fn point_path(axis: SweepAxis, value: &str, seed: u64, multi_seed: bool) -> PathBuf {
    let file = format!("{}={value}.csv", axis.name());
    if multi_seed {
        Path::new(&format!("seed={seed}")).join(file)
    } else {
        PathBuf::from(file)
    }
}

/// Run every `(value, seed)` point and write its metrics under `out_dir`.
pub fn sweep(base: &ConfigArgs, axis: SweepAxis, values: &[String], out_dir: &Path) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::key("values", "a sweep needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v)?.resolve().map(|c| (v, c)))
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::new();
    for (value, cfg) in configs {
        let multi = cfg.seeds.len() > 1;
        for &seed in &cfg.seeds {
            let report = run_experiment(&cfg, seed)?;
            let path = out_dir.join(point_path(axis, value, seed, multi));
            write_metrics(&report.metrics, &path)?;
            points.push(SweepPoint {
                value: value.clone(),
                seed,
                path,
                best_student_acc: report.best_student_acc,
                best_teacher_acc: report.best_teacher_acc,
            });
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_and_paths() {
        for a in [SweepAxis::Clients, SweepAxis::SampleRatio, SweepAxis::Beta, SweepAxis::Mode] {
            assert_eq!(a.name().parse::<SweepAxis>().unwrap(), a);
        }
        assert!("lr".parse::<SweepAxis>().is_err());
        assert_eq!(point_path(SweepAxis::SampleRatio, "0.1", 3, false), PathBuf::from("C=0.1.csv"));
        assert_eq!(point_path(SweepAxis::Beta, "5", 3, true), PathBuf::from("seed=3/beta=5.csv"));
    }

    #[test]
    fn apply_changes_only_the_axis() {
        let base = ConfigArgs::from_toml("rounds = 3\nseeds = [1, 2]").unwrap();
        let a = SweepAxis::Beta.apply(&base, "0.1").unwrap().resolve().unwrap();
        let b = SweepAxis::Beta.apply(&base, "5.0").unwrap().resolve().unwrap();
        assert_eq!(a.seeds, b.seeds);
        assert_eq!(a.rounds, b.rounds);
        assert_ne!(a.beta, b.beta);
        assert!(SweepAxis::Clients.apply(&base, "x").is_err());
    }
}
