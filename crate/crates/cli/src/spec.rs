//! Experiment spec files.
//!
//! A spec names a dataset generator, the shared round schedule and a list
//! of runs. Each run is one algorithm configuration; every run is repeated
//! `repetitions` times with seeds `seed + rep`, and the dataset of a
//! repetition is generated with the same seed so all runs of a repetition
//! see identical clients.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use dagfl::baselines::{Aggregation, FedConfig};
use dagfl::datasets::{self, ClientDataset, ClusteredConfig, FedProxConfig};
use dagfl::simulation::{PoisonConfig, SimConfig};
use dagfl::walk::WalkConfig;
use dagfl::{Architecture, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

fn default_repetitions() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    pub name: String,
    pub dataset: DatasetSpec,
    /// Hidden layer widths. Defaults to one layer of 32.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_layers: Option<Vec<usize>>,
    pub rounds: usize,
    pub clients_per_round: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    /// Output root; `--out` and the `DAGFL_OUT` variable take its place
    /// when it is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub runs: Vec<RunSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum DatasetSpec {
    Clustered(ClusteredConfig),
    Fedprox(FedProxConfig),
}

impl DatasetSpec {
    pub fn generate(&self, seed: u64) -> dagfl::Result<Vec<ClientDataset>> {
        match self {
            DatasetSpec::Clustered(c) => datasets::gen_clustered(c, seed),
            DatasetSpec::Fedprox(c) => datasets::gen_fedprox_synthetic(c, seed),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            DatasetSpec::Clustered(c) => (c.feature_dim, c.num_classes()),
            DatasetSpec::Fedprox(c) => (c.feature_dim, c.num_classes),
        }
    }

    pub fn num_clients(&self) -> usize {
        match self {
            DatasetSpec::Clustered(c) => c.num_clients,
            DatasetSpec::Fedprox(c) => c.num_clients,
        }
    }

    fn validate(&self) -> dagfl::Result<()> {
        match self {
            DatasetSpec::Clustered(c) => c.validate(),
            DatasetSpec::Fedprox(c) => c.validate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Dag,
    Fedavg,
    Fedprox,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Dag => "dag",
            Algorithm::Fedavg => "fedavg",
            Algorithm::Fedprox => "fedprox",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// Directory name of the run; unique within a spec.
    pub label: String,
    pub algorithm: Algorithm,
    /// dag only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walk: Option<WalkConfig>,
    /// dag only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poison: Option<PoisonConfig>,
    /// fedprox only, default 0.1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proximal_mu: Option<f64>,
    /// fedavg and fedprox only, default weighted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation: Option<Aggregation>,
    /// Overrides the spec-level schedule for this run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients_per_round: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

impl RunSpec {
    pub fn dag(label: impl Into<String>, walk: WalkConfig) -> Self {
        RunSpec {
            label: label.into(),
            algorithm: Algorithm::Dag,
            walk: Some(walk),
            poison: None,
            proximal_mu: None,
            aggregation: None,
            clients_per_round: None,
            train: None,
        }
    }

    pub fn baseline(label: impl Into<String>, algorithm: Algorithm) -> Self {
        RunSpec {
            label: label.into(),
            algorithm,
            walk: None,
            poison: None,
            proximal_mu: None,
            aggregation: None,
            clients_per_round: None,
            train: None,
        }
    }
}

/// Fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "algorithm", rename_all = "snake_case")]
pub enum RunConfig {
    Dag(SimConfig),
    Fedavg(FedConfig),
    Fedprox(FedConfig),
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        match self {
            RunConfig::Dag(c) => c.seed,
            RunConfig::Fedavg(c) | RunConfig::Fedprox(c) => c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedRun {
    pub label: String,
    pub repetition: usize,
    pub config: RunConfig,
}

impl ExperimentSpec {
    /// Parses and validates a spec. All failures are schema errors.
    pub fn from_json(text: &str, source: &Path) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(text).map_err(|e| CliError::Schema {
            path: source.to_path_buf(),
            message: e.to_string(),
        })?;
        spec.validate().map_err(|message| CliError::Schema {
            path: source.to_path_buf(),
            message,
        })?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn architecture(&self) -> dagfl::Result<Architecture> {
        let (input, classes) = self.dataset.dims();
        match &self.hidden_layers {
            None => Architecture::default_for(input, classes),
            Some(hidden) => {
                let mut sizes = vec![input];
                sizes.extend(hidden);
                sizes.push(classes);
                Architecture::new(sizes)
            }
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            ));
        }
        if self.name.is_empty() {
            return Err("name: must not be empty".into());
        }
        if self.rounds == 0 {
            return Err("rounds: must be positive".into());
        }
        if self.repetitions == 0 {
            return Err("repetitions: must be at least 1".into());
        }
        if self.runs.is_empty() {
            return Err("runs: at least one run is required".into());
        }
        self.dataset.validate().map_err(|e| format!("dataset: {e}"))?;
        self.architecture().map_err(|e| format!("hidden_layers: {e}"))?;
        let mut labels = BTreeSet::new();
        for (i, run) in self.runs.iter().enumerate() {
            let at = format!("runs[{i}]");
            if !valid_label(&run.label) {
                return Err(format!("{at}.label: use letters, digits, '.', '-' or '_', got {:?}", run.label));
            }
            if !labels.insert(run.label.as_str()) {
                return Err(format!("{at}.label: duplicate label {:?}", run.label));
            }
            let misplaced = match run.algorithm {
                Algorithm::Dag => [
                    ("proximal_mu", run.proximal_mu.is_some()),
                    ("aggregation", run.aggregation.is_some()),
                ]
                .into_iter()
                .find(|f| f.1),
                Algorithm::Fedavg => [
                    ("walk", run.walk.is_some()),
                    ("poison", run.poison.is_some()),
                    ("proximal_mu", run.proximal_mu.is_some()),
                ]
                .into_iter()
                .find(|f| f.1),
                Algorithm::Fedprox => [("walk", run.walk.is_some()), ("poison", run.poison.is_some())]
                    .into_iter()
                    .find(|f| f.1),
            };
            if let Some((field, _)) = misplaced {
                return Err(format!("{at}.{field}: not used by algorithm {}", run.algorithm.as_str()));
            }
            let num_clients = self.dataset.num_clients();
            let checked = match self.run_config(run, self.seed) {
                RunConfig::Dag(c) => c.validate(num_clients),
                RunConfig::Fedavg(c) | RunConfig::Fedprox(c) => c.validate(num_clients),
            };
            checked.map_err(|e| format!("{at} ({}): {e}", run.label))?;
        }
        Ok(())
    }

    fn run_config(&self, run: &RunSpec, seed: u64) -> RunConfig {
        let clients_per_round = run.clients_per_round.unwrap_or(self.clients_per_round);
        let train = run.train.unwrap_or(self.train);
        let fed = |mu: f64| FedConfig {
            rounds: self.rounds,
            clients_per_round,
            train,
            proximal_mu: mu,
            aggregation: run.aggregation.unwrap_or(Aggregation::Weighted),
            seed,
        };
        match run.algorithm {
            Algorithm::Dag => RunConfig::Dag(SimConfig {
                rounds: self.rounds,
                clients_per_round,
                walk: run.walk.unwrap_or_default(),
                train,
                poison: run.poison,
                seed,
            }),
            Algorithm::Fedavg => RunConfig::Fedavg(fed(0.0)),
            Algorithm::Fedprox => RunConfig::Fedprox(fed(run.proximal_mu.unwrap_or(0.1))),
        }
    }

    /// Every (repetition, run) pair in execution order.
    pub fn resolve(&self) -> Vec<ResolvedRun> {
        (0..self.repetitions)
            .flat_map(|rep| {
                self.runs.iter().map(move |run| ResolvedRun {
                    label: run.label.clone(),
                    repetition: rep,
                    config: self.run_config(run, self.seed + rep as u64),
                })
            })
            .collect()
    }
}

fn valid_label(label: &str) -> bool {
    !label.is_empty()
        && label != "."
        && label != ".."
        && label.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_'))
}
