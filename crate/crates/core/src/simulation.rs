//! Round-based driver for the DAG protocol.
//!
//! Every round a random subset of clients works against the DAG as it was
//! at the start of the round: select two tips, average them, train on
//! local data, and publish the result only if it beats a freshly selected
//! reference model on the local test set. Accepted transactions are added
//! at the end of the round in ascending client order. Each client's
//! randomness comes from a stream keyed by `(seed, round, client)`, so
//! clients can run in parallel without changing the outcome.

use std::collections::BTreeSet;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dag::{Dag, TransactionId};
use crate::datasets::{self, ClientDataset};
use crate::error::{Error, Result};
use crate::learning::{self, Architecture, TrainConfig};
use crate::metrics;
use crate::rng::{stream, tag};
use crate::walk::{self, CachedEvaluator, WalkConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoisonConfig {
    /// Fraction of all clients whose data gets flipped.
    pub fraction: f64,
    /// Number of clean rounds before the flip takes effect.
    pub start_round: usize,
    pub flip_pair: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub rounds: usize,
    pub clients_per_round: usize,
    pub walk: WalkConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub poison: Option<PoisonConfig>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            rounds: 100,
            clients_per_round: 10,
            walk: WalkConfig::default(),
            train: TrainConfig::default(),
            poison: None,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        self.walk.validate()?;
        self.train.validate()?;
        validate_sampling(self.clients_per_round, num_clients)?;
        if let Some(p) = &self.poison {
            if !(0.0..=1.0).contains(&p.fraction) {
                return Err(Error::InvalidConfig(format!("poison fraction {} outside [0, 1]", p.fraction)));
            }
        }
        Ok(())
    }
}

pub(crate) fn validate_sampling(clients_per_round: usize, num_clients: usize) -> Result<()> {
    if clients_per_round == 0 || clients_per_round > num_clients {
        return Err(Error::InvalidConfig(format!(
            "clients_per_round must be in 1..={num_clients}, got {clients_per_round}"
        )));
    }
    Ok(())
}

/// Clients active in `round`, ascending. Shared with the baselines so all
/// algorithms see the same participants for equal seeds.
pub fn sample_clients(seed: u64, round: usize, num_clients: usize, count: usize) -> Vec<usize> {
    let mut rng = stream(&[seed, tag::SAMPLE_CLIENTS, round as u64]);
    let mut picked = index::sample(&mut rng, num_clients, count).into_vec();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: usize,
    pub published: bool,
    pub tx_id: Option<TransactionId>,
    /// Accuracy of the freshly trained model on the client's test split,
    /// recorded whether or not it was published.
    pub accuracy: f64,
    pub loss: f64,
    pub reference_accuracy: Option<f64>,
    pub walk_duration: f64,
    pub walks: usize,
    pub walk_steps: usize,
    pub walk_evaluations: usize,
    pub poisoned: bool,
    /// Flipped-prediction rate of the reference model on clean labels.
    pub flipped_rate: Option<f64>,
    pub approved_poisoned: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<ClientRecord>,
    pub mean_accuracy: f64,
    pub mean_loss: f64,
    pub tips_count: usize,
}

impl RoundRecord {
    pub(crate) fn new(round: usize, clients: Vec<ClientRecord>, tips_count: usize) -> Self {
        let n = clients.len().max(1) as f64;
        let mean_accuracy = clients.iter().map(|c| c.accuracy).sum::<f64>() / n;
        let mean_loss = clients.iter().map(|c| c.loss).sum::<f64>() / n;
        RoundRecord { round, clients, mean_accuracy, mean_loss, tips_count }
    }

    /// Population standard deviation of the clients' accuracies.
    pub fn accuracy_std(&self) -> f64 {
        let n = self.clients.len() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let var = self
            .clients
            .iter()
            .map(|c| (c.accuracy - self.mean_accuracy).powi(2))
            .sum::<f64>()
            / n;
        var.sqrt()
    }
}

/// Graph metrics of the DAG at the end of a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub modularity: Option<f64>,
    pub num_partitions: usize,
    pub misclassification: f64,
    pub approval_pureness: Option<f64>,
    /// Mean over the round's clients of poisoned transactions behind their
    /// reference tips.
    pub approved_poisoned: f64,
    pub flipped_rate_benign: Option<f64>,
    pub flipped_rate_poisoned: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub dag: Dag,
    pub rounds: Vec<RoundRecord>,
    pub metrics: Vec<RoundMetrics>,
    pub poisoned_clients: BTreeSet<usize>,
}

struct Outcome {
    record: ClientRecord,
    parents: (TransactionId, TransactionId),
    params: learning::ModelParams,
}

/// Client state during a run: current (possibly poisoned) data plus the
/// clean copy used for measuring flipped predictions.
pub struct Participant {
    pub data: ClientDataset,
    pub clean: ClientDataset,
}

fn client_step(
    dag: &Dag,
    p: &Participant,
    cfg: &SimConfig,
    round: usize,
) -> Result<Outcome> {
    let ds = &p.data;
    let mut rng = stream(&[cfg.seed, tag::CLIENT, round as u64, ds.client_id as u64]);
    let mut evaluator = CachedEvaluator::new(&ds.test);

    let selection = walk::select_tips(dag, &mut evaluator, &cfg.walk, &mut rng)?;
    let averaged = walk::average_tips(dag, selection.tips)?;
    let trained = learning::train(&averaged, &ds.train, &cfg.train, &mut rng)?;
    let reference = walk::reference_model(dag, &mut evaluator, &cfg.walk, &mut rng)?;

    let own = learning::evaluate(&trained, &ds.test)?;
    let reference_accuracy = learning::evaluate(&reference.params, &ds.test)?.accuracy;
    let published = trained.is_finite() && own.accuracy > reference_accuracy;

    let walks: Vec<_> = selection.walks.iter().chain(&reference.selection.walks).collect();
    let (flipped_rate, approved_poisoned) = match &cfg.poison {
        Some(poison) => {
            let (a, b) = poison.flip_pair;
            let rate = datasets::flipped_prediction_rate(&reference.params, &p.clean.test, a, b).ok();
            let count = metrics::approved_poisoned_count(dag, reference.selection.tips)?;
            (rate, Some(count))
        }
        None => (None, None),
    };

    Ok(Outcome {
        record: ClientRecord {
            client_id: ds.client_id,
            published,
            tx_id: None,
            accuracy: own.accuracy,
            loss: own.loss,
            reference_accuracy: Some(reference_accuracy),
            walk_duration: walks.iter().map(|w| w.duration).sum(),
            walks: walks.len(),
            walk_steps: walks.iter().map(|w| w.steps).sum(),
            walk_evaluations: walks.iter().map(|w| w.evaluations).sum(),
            poisoned: ds.poisoned,
            flipped_rate,
            approved_poisoned,
        },
        parents: selection.tips,
        params: trained,
    })
}

/// Runs one round against `dag` and appends the accepted transactions.
pub fn run_round(
    dag: &mut Dag,
    participants: &[Participant],
    cfg: &SimConfig,
    round: usize,
) -> Result<RoundRecord> {
    let active = sample_clients(cfg.seed, round, participants.len(), cfg.clients_per_round);
    let snapshot: &Dag = dag;
    let outcomes: Vec<Outcome> = active
        .par_iter()
        .map(|&c| client_step(snapshot, &participants[c], cfg, round))
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(outcomes.len());
    for Outcome { mut record, parents, params } in outcomes {
        if record.published {
            let id = dag.add_transaction(parents, params, record.client_id, round, record.poisoned)?;
            record.tx_id = Some(id);
        }
        records.push(record);
    }
    Ok(RoundRecord::new(round, records, dag.tips().len()))
}

/// Picks `ceil(fraction * n)` clients to poison.
pub fn choose_poisoned(seed: u64, num_clients: usize, fraction: f64) -> BTreeSet<usize> {
    let count = ((fraction * num_clients as f64).ceil() as usize).min(num_clients);
    let mut rng = stream(&[seed, tag::POISON]);
    index::sample(&mut rng, num_clients, count).into_iter().collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn round_metrics(dag: &Dag, clusters: &[usize], record: &RoundRecord) -> RoundMetrics {
    let graph = metrics::build_client_graph(dag);
    let partition = metrics::louvain(&graph).ok();
    let modularity = partition.as_ref().and_then(|p| metrics::modularity(&graph, p).ok());
    let flipped = |poisoned: bool| {
        mean(
            record
                .clients
                .iter()
                .filter(|c| c.poisoned == poisoned)
                .filter_map(|c| c.flipped_rate),
        )
    };
    RoundMetrics {
        round: record.round,
        modularity,
        num_partitions: partition.as_ref().map_or(0, metrics::num_communities),
        misclassification: partition
            .as_ref()
            .map_or(0.0, |p| metrics::misclassification_fraction(p, clusters)),
        approval_pureness: metrics::approval_pureness(dag, clusters).ok(),
        approved_poisoned: mean(
            record.clients.iter().filter_map(|c| c.approved_poisoned.map(|n| n as f64)),
        )
        .unwrap_or(0.0),
        flipped_rate_benign: flipped(false),
        flipped_rate_poisoned: flipped(true),
    }
}

/// Runs the whole protocol from a fresh genesis model.
pub fn run_simulation(
    clients: &[ClientDataset],
    arch: &Architecture,
    cfg: &SimConfig,
) -> Result<SimulationResult> {
    cfg.validate(clients.len())?;
    let genesis = learning::init_params(arch, &mut stream(&[cfg.seed, tag::INIT]));
    let mut dag = Dag::create_genesis(genesis);
    let mut participants: Vec<Participant> = clients
        .iter()
        .map(|c| Participant { data: c.clone(), clean: c.clone() })
        .collect();
    let clusters: Vec<usize> = clients.iter().map(|c| c.cluster).collect();
    let poisoned_clients = match &cfg.poison {
        Some(p) => choose_poisoned(cfg.seed, clients.len(), p.fraction),
        None => BTreeSet::new(),
    };

    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut round_metrics_log = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        if let Some(p) = &cfg.poison {
            if round == p.start_round + 1 {
                let (a, b) = p.flip_pair;
                for &c in &poisoned_clients {
                    participants[c].data = datasets::poison_flip_labels(&participants[c].clean, a, b, arch.num_classes())?;
                }
            }
        }
        let record = run_round(&mut dag, &participants, cfg, round)?;
        round_metrics_log.push(round_metrics(&dag, &clusters, &record));
        rounds.push(record);
    }
    Ok(SimulationResult { dag, rounds, metrics: round_metrics_log, poisoned_clients })
}

/// Checks the protocol invariants of a finished run and returns a list of
/// violations (empty when everything holds).
pub fn protocol_violations(result: &SimulationResult, clients_per_round: usize) -> Vec<String> {
    let dag = &result.dag;
    let mut problems = Vec::new();
    let mut per_round = std::collections::BTreeMap::<usize, usize>::new();
    for t in dag.transactions().filter(|t| !t.is_genesis()) {
        *per_round.entry(t.round).or_default() += 1;
        for &p in &t.parents {
            match dag.get(p) {
                Ok(parent) if parent.round < t.round => {}
                Ok(parent) => problems.push(format!(
                    "{} (round {}) approves {} from round {}",
                    t.id, t.round, p, parent.round
                )),
                Err(e) => problems.push(e.to_string()),
            }
        }
        match dag.ancestors(t.id) {
            Ok(anc) if anc.contains(&t.id) => problems.push(format!("{} is its own ancestor", t.id)),
            Ok(_) => {}
            Err(e) => problems.push(e.to_string()),
        }
        if !t.params.is_finite() {
            problems.push(format!("{} carries non-finite parameters", t.id));
        }
    }
    for (round, n) in per_round {
        if n > clients_per_round {
            problems.push(format!("round {round} added {n} transactions"));
        }
    }
    for r in &result.rounds {
        for c in &r.clients {
            match (c.published, c.reference_accuracy) {
                (true, Some(reference)) if c.accuracy > reference => {}
                (true, _) => problems.push(format!(
                    "round {} client {} published without beating its reference",
                    r.round, c.client_id
                )),
                (false, _) => {}
            }
            if c.published != c.tx_id.is_some() {
                problems.push(format!("round {} client {}: publish flag and tx id disagree", r.round, c.client_id));
            }
        }
    }
    let childless: BTreeSet<TransactionId> = dag
        .transactions()
        .filter(|t| dag.children(t.id).is_ok_and(|c| c.is_empty()))
        .map(|t| t.id)
        .collect();
    if &childless != dag.tips() {
        problems.push("tip set differs from the childless transactions".into());
    }
    problems
}
