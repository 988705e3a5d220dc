//! Final-round statistics across repetitions.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub algorithm: String,
    pub repetitions: usize,
    pub final_round: usize,
    pub accuracy: MeanStd,
    pub loss: MeanStd,
    pub approval_pureness: Option<MeanStd>,
    pub modularity: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub runs: Vec<RunSummary>,
}

#[derive(Debug, Deserialize)]
struct AggregateIn {
    algorithm: String,
    round: usize,
    mean_accuracy: f64,
    mean_loss: f64,
}

#[derive(Debug, Deserialize)]
struct MetricsIn {
    modularity: Option<f64>,
    approval_pureness: Option<f64>,
}

/// One line of the `summarize` table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    /// Run directory relative to the scanned root, repetition removed.
    pub configuration: String,
    pub algorithm: String,
    pub repetitions: usize,
    pub final_round: usize,
    pub accuracy: MeanStd,
    pub loss: MeanStd,
    pub approval_pureness: Option<MeanStd>,
    pub modularity: Option<MeanStd>,
}

fn find_aggregates(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()).map_err(|e| CliError::io(dir, e)))
        .collect::<Result<_>>()?;
    paths.sort();
    for p in paths {
        if p.is_dir() {
            find_aggregates(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "aggregate.csv") {
            out.push(p);
        }
    }
    Ok(())
}

fn last_row<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let mut last = None;
    for row in r.deserialize() {
        last = Some(row.map_err(|e| CliError::csv(path, e))?);
    }
    Ok(last)
}

fn is_repetition(component: &str) -> bool {
    component.strip_prefix("rep-").is_some_and(|k| !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit()))
}

struct Entry {
    algorithm: String,
    round: usize,
    accuracy: f64,
    loss: f64,
    pureness: Option<f64>,
    modularity: Option<f64>,
}

/// Scans `dir` for run outputs and groups final rounds by configuration.
pub fn summarize(dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut files = Vec::new();
    if dir.is_dir() {
        find_aggregates(dir, &mut files)?;
    }
    let mut groups: BTreeMap<String, Vec<Entry>> = BTreeMap::new();
    for path in &files {
        let Some(agg) = last_row::<AggregateIn>(path)? else { continue };
        let run_dir = path.parent().unwrap();
        let metrics_path = run_dir.join("metrics.csv");
        let metrics = if metrics_path.exists() { last_row::<MetricsIn>(&metrics_path)? } else { None };
        let rel = run_dir.strip_prefix(dir).unwrap_or(run_dir);
        let configuration: Vec<String> = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .filter(|c| !is_repetition(c))
            .collect();
        let configuration = if configuration.is_empty() { ".".into() } else { configuration.join("/") };
        groups.entry(configuration).or_default().push(Entry {
            algorithm: agg.algorithm,
            round: agg.round,
            accuracy: agg.mean_accuracy,
            loss: agg.mean_loss,
            pureness: metrics.as_ref().and_then(|m| m.approval_pureness),
            modularity: metrics.as_ref().and_then(|m| m.modularity),
        });
    }
    if groups.is_empty() {
        return Err(CliError::NoRuns(dir.to_path_buf()));
    }
    Ok(groups
        .into_iter()
        .map(|(configuration, e)| {
            let stat = |get: fn(&Entry) -> f64| MeanStd::of(&e.iter().map(get).collect::<Vec<_>>());
            let optional = |get: fn(&Entry) -> Option<f64>| {
                let v: Option<Vec<f64>> = e.iter().map(get).collect();
                v.map(|v| MeanStd::of(&v))
            };
            SummaryRow {
                configuration,
                algorithm: e[0].algorithm.clone(),
                repetitions: e.len(),
                final_round: e.iter().map(|x| x.round).max().unwrap(),
                accuracy: stat(|x| x.accuracy),
                loss: stat(|x| x.loss),
                approval_pureness: optional(|x| x.pureness),
                modularity: optional(|x| x.modularity),
            }
        })
        .collect())
}

pub fn format_table(rows: &[SummaryRow]) -> String {
    let opt = |v: &Option<MeanStd>| v.map_or_else(|| "-".to_string(), |m| m.to_string());
    let width = rows.iter().map(|r| r.configuration.len()).max().unwrap_or(0).max("configuration".len());
    let mut out = format!(
        "{:<width$}  {:<9}  {:>4}  {:>5}  {:<17}  {:<17}  {:<17}  {:<17}\n",
        "configuration", "algorithm", "reps", "round", "accuracy", "loss", "pureness", "modularity"
    );
    for r in rows {
        out += &format!(
            "{:<width$}  {:<9}  {:>4}  {:>5}  {:<17}  {:<17}  {:<17}  {:<17}\n",
            r.configuration,
            r.algorithm,
            r.repetitions,
            r.final_round,
            r.accuracy.to_string(),
            r.loss.to_string(),
            opt(&r.approval_pureness),
            opt(&r.modularity)
        );
    }
    out
}
