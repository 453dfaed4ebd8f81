use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ResolvedConfig;
use super::{dataset_hash, sha256_json};
use crate::algorithms::MetricRow;
use crate::domains::DomainSet;
use crate::error::{Error, Result};

/// JSON schema that every serialized [`RunReport`] satisfies.
pub const REPORT_SCHEMA: &str = include_str!("../../schema/report.schema.json");

pub const FORMAT_VERSION: u32 = 1;

/// Outcome of one (held-out fold, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub held_out: usize,
    pub seed: u64,
    pub heldout_acc: f64,
    pub final_loss: f64,
    /// Training samples drawn per domain; zero at `held_out`.
    pub samples_seen: Vec<usize>,
    pub metrics: Vec<MetricRow>,
}

/// Wall-clock of one run. Kept out of `report.json` so that reports of
/// identical configurations are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub held_out: usize,
    pub seed: u64,
    pub seconds: f64,
    pub seconds_per_iter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub held_out: usize,
    pub mean_acc: f64,
    /// Standard error over seeds; 0 with a single seed.
    pub stderr_acc: f64,
    pub mean_final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Mean held-out accuracy over every run.
    pub mean_acc: f64,
    pub stderr_acc: f64,
    pub mean_final_loss: f64,
    pub per_fold: Vec<FoldSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    /// SHA-256 of the resolved configuration.
    pub config_hash: String,
    /// SHA-256 of the dataset encoding.
    pub dataset_hash: String,
    pub num_domains: usize,
    pub seed_count: usize,
    pub config: ResolvedConfig,
    pub summary: Summary,
    pub runs: Vec<RunRecord>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub timing: Vec<RunTiming>,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl RunReport {
    pub(super) fn assemble(
        config: &ResolvedConfig,
        set: &DomainSet,
        runs: Vec<RunRecord>,
        timing: Vec<RunTiming>,
        warnings: Vec<String>,
    ) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Config("experiment produced no runs".into()));
        }
        let mut folds: Vec<usize> = runs.iter().map(|r| r.held_out).collect();
        folds.dedup();
        let per_fold = folds
            .iter()
            .map(|&f| {
                let of: Vec<&RunRecord> = runs.iter().filter(|r| r.held_out == f).collect();
                let accs: Vec<f64> = of.iter().map(|r| r.heldout_acc).collect();
                let losses: Vec<f64> = of.iter().map(|r| r.final_loss).collect();
                let (mean_acc, stderr_acc) = mean_stderr(&accs);
                FoldSummary {
                    held_out: f,
                    mean_acc,
                    stderr_acc,
                    mean_final_loss: mean_stderr(&losses).0,
                }
            })
            .collect();
        let accs: Vec<f64> = runs.iter().map(|r| r.heldout_acc).collect();
        let losses: Vec<f64> = runs.iter().map(|r| r.final_loss).collect();
        let (mean_acc, stderr_acc) = mean_stderr(&accs);
        Ok(Self {
            format_version: FORMAT_VERSION,
            config_hash: sha256_json(config)?,
            dataset_hash: dataset_hash(set),
            num_domains: set.len(),
            seed_count: config.seeds.len(),
            config: config.clone(),
            summary: Summary {
                mean_acc,
                stderr_acc,
                mean_final_loss: mean_stderr(&losses).0,
                per_fold,
            },
            runs,
            warnings,
            timing,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Timings are not part of the JSON and come back empty.
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `held_out,seed,iter,loss,heldout_acc,alignment`, one row per logged iteration.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("held_out,seed,iter,loss,heldout_acc,alignment\n");
        for r in &self.runs {
            for m in &r.metrics {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    r.held_out, r.seed, m.iter, m.loss, m.heldout_acc, m.alignment
                )
                .expect("writing to a String");
            }
        }
        out
    }

    /// `held_out,seed,heldout_acc`, one row per run.
    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("held_out,seed,heldout_acc\n");
        for r in &self.runs {
            writeln!(out, "{},{},{}", r.held_out, r.seed, r.heldout_acc).expect("writing to a String");
        }
        out
    }

    /// `held_out,seed,iter,loss,heldout_acc`
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("held_out,seed,iter,loss,heldout_acc\n");
        for r in &self.runs {
            for m in &r.metrics {
                writeln!(out, "{},{},{},{},{}", r.held_out, r.seed, m.iter, m.loss, m.heldout_acc)
                    .expect("writing to a String");
            }
        }
        out
    }

    /// `held_out,seed,iter,alignment`
    pub fn alignment_csv(&self) -> String {
        let mut out = String::from("held_out,seed,iter,alignment\n");
        for r in &self.runs {
            for m in &r.metrics {
                writeln!(out, "{},{},{},{}", r.held_out, r.seed, m.iter, m.alignment).expect("writing to a String");
            }
        }
        out
    }

    /// Writes `report.json`, `metrics.csv` and `timing.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("report.json", self.to_json()?),
            ("metrics.csv", self.metrics_csv()),
            ("timing.json", serde_json::to_string_pretty(&self.timing)? + "\n"),
        ];
        write_all(dir, &files)
    }
}

fn write_all(dir: &Path, files: &[(&str, String)]) -> Result<Vec<PathBuf>> {
    files
        .iter()
        .map(|(name, body)| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// Writes `accuracy.csv`, `curves.csv` and `alignment.csv` into `dir`.
pub fn emit_plot_data(report: &RunReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_all(
        dir,
        &[
            ("accuracy.csv", report.accuracy_csv()),
            ("curves.csv", report.curves_csv()),
            ("alignment.csv", report.alignment_csv()),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stderr_of_known_sample() {
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_stderr(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn schema_is_valid_json() {
        let v: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
        assert_eq!(v["type"], "object");
    }
}
