//! Executes a spec and writes its outputs.
//!
//! Layout under the output root:
//!
//! ```text
//! <name>/spec.json
//! <name>/summary.json
//! <name>/rep-<k>/<label>/clients.csv
//! <name>/rep-<k>/<label>/aggregate.csv
//! <name>/rep-<k>/<label>/metrics.csv   (dag runs)
//! <name>/rep-<k>/<label>/dag.jsonl     (dag runs)
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use dagfl::baselines::run_baseline;
use dagfl::simulation::{run_simulation, RoundMetrics, RoundRecord};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::spec::{ExperimentSpec, ResolvedRun, RunConfig};
use crate::summary::{MeanStd, RunSummary, Summary};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_root: PathBuf,
    /// Include model parameters in `dag.jsonl`.
    pub export_params: bool,
}

#[derive(Debug, Serialize)]
struct ClientRow<'a> {
    algorithm: &'a str,
    round: usize,
    client_id: usize,
    published: bool,
    accuracy: f64,
    loss: f64,
    walk_duration_s: f64,
}

#[derive(Debug, Serialize)]
struct AggregateRow<'a> {
    algorithm: &'a str,
    round: usize,
    mean_accuracy: f64,
    accuracy_std: f64,
    mean_loss: f64,
    tips_count: usize,
    published: usize,
}

#[derive(Debug, Serialize)]
struct MetricsRow {
    round: usize,
    modularity: Option<f64>,
    num_partitions: usize,
    misclassification: f64,
    approval_pureness: Option<f64>,
    approved_poisoned: f64,
    flipped_rate_benign: Option<f64>,
    flipped_rate_poisoned: Option<f64>,
}

impl From<&RoundMetrics> for MetricsRow {
    fn from(m: &RoundMetrics) -> Self {
        MetricsRow {
            round: m.round,
            modularity: m.modularity,
            num_partitions: m.num_partitions,
            misclassification: m.misclassification,
            approval_pureness: m.approval_pureness,
            approved_poisoned: m.approved_poisoned,
            flipped_rate_benign: m.flipped_rate_benign,
            flipped_rate_poisoned: m.flipped_rate_poisoned,
        }
    }
}

pub fn experiment_dir(spec: &ExperimentSpec, out_root: &Path) -> PathBuf {
    out_root.join(&spec.name)
}

pub fn run_dir(experiment: &Path, run: &ResolvedRun) -> PathBuf {
    experiment.join(format!("rep-{}", run.repetition)).join(&run.label)
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_rounds(dir: &Path, algorithm: &str, rounds: &[RoundRecord]) -> Result<()> {
    write_csv(
        &dir.join("clients.csv"),
        rounds.iter().flat_map(|r| {
            r.clients.iter().map(move |c| ClientRow {
                algorithm,
                round: r.round,
                client_id: c.client_id,
                published: c.published,
                accuracy: c.accuracy,
                loss: c.loss,
                walk_duration_s: c.walk_duration,
            })
        }),
    )?;
    write_csv(
        &dir.join("aggregate.csv"),
        rounds.iter().map(|r| AggregateRow {
            algorithm,
            round: r.round,
            mean_accuracy: r.mean_accuracy,
            accuracy_std: r.accuracy_std(),
            mean_loss: r.mean_loss,
            tips_count: r.tips_count,
            published: r.clients.iter().filter(|c| c.published).count(),
        }),
    )
}

/// Final-round numbers of one repetition of one run.
struct Final {
    round: usize,
    accuracy: f64,
    loss: f64,
    approval_pureness: Option<f64>,
    modularity: Option<f64>,
}

fn execute(spec: &ExperimentSpec, run: &ResolvedRun, dir: &Path, opts: &RunOptions) -> Result<Final> {
    let fail = |source| CliError::Run { label: run.label.clone(), repetition: run.repetition, source };
    let clients = spec.dataset.generate(run.config.seed()).map_err(fail)?;
    let arch = spec.architecture().map_err(fail)?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    match &run.config {
        RunConfig::Dag(cfg) => {
            let result = run_simulation(&clients, &arch, cfg).map_err(fail)?;
            write_rounds(dir, "dag", &result.rounds)?;
            write_csv(&dir.join("metrics.csv"), result.metrics.iter().map(MetricsRow::from))?;
            let path = dir.join("dag.jsonl");
            let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
            result
                .dag
                .write_jsonl(BufWriter::new(file), opts.export_params)
                .map_err(|e| CliError::io(&path, e))?;
            let (last, metrics) = (result.rounds.last().unwrap(), result.metrics.last().unwrap());
            Ok(Final {
                round: last.round,
                accuracy: last.mean_accuracy,
                loss: last.mean_loss,
                approval_pureness: metrics.approval_pureness,
                modularity: metrics.modularity,
            })
        }
        RunConfig::Fedavg(cfg) | RunConfig::Fedprox(cfg) => {
            let algorithm = if matches!(run.config, RunConfig::Fedavg(_)) { "fedavg" } else { "fedprox" };
            let result = run_baseline(&clients, &arch, cfg).map_err(fail)?;
            write_rounds(dir, algorithm, &result.rounds)?;
            let last = result.rounds.last().unwrap();
            Ok(Final {
                round: last.round,
                accuracy: last.mean_accuracy,
                loss: last.mean_loss,
                approval_pureness: None,
                modularity: None,
            })
        }
    }
}

/// Runs every repetition of every run and writes `summary.json`.
pub fn run_experiment(spec: &ExperimentSpec, opts: &RunOptions) -> Result<Summary> {
    let experiment = experiment_dir(spec, &opts.out_root);
    fs::create_dir_all(&experiment).map_err(|e| CliError::io(&experiment, e))?;
    let spec_path = experiment.join("spec.json");
    fs::write(&spec_path, spec.to_json()).map_err(|e| CliError::io(&spec_path, e))?;

    let mut finals: BTreeMap<&str, Vec<Final>> = BTreeMap::new();
    for run in spec.resolve() {
        let dir = run_dir(&experiment, &run);
        let f = execute(spec, &run, &dir, opts)?;
        eprintln!(
            "{} rep {} {}: round {} accuracy {:.4} loss {:.4}",
            spec.name, run.repetition, run.label, f.round, f.accuracy, f.loss
        );
        let label = spec.runs.iter().find(|r| r.label == run.label).unwrap().label.as_str();
        finals.entry(label).or_default().push(f);
    }

    let runs = spec
        .runs
        .iter()
        .map(|r| {
            let f = &finals[r.label.as_str()];
            let optional = |get: fn(&Final) -> Option<f64>| {
                let v: Option<Vec<f64>> = f.iter().map(get).collect();
                v.map(|v| MeanStd::of(&v))
            };
            RunSummary {
                label: r.label.clone(),
                algorithm: r.algorithm.as_str().into(),
                repetitions: f.len(),
                final_round: f[0].round,
                accuracy: MeanStd::of(&f.iter().map(|x| x.accuracy).collect::<Vec<_>>()),
                loss: MeanStd::of(&f.iter().map(|x| x.loss).collect::<Vec<_>>()),
                approval_pureness: optional(|x| x.approval_pureness),
                modularity: optional(|x| x.modularity),
            }
        })
        .collect();
    let summary = Summary { name: spec.name.clone(), runs };
    let path = experiment.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(summary)
}
