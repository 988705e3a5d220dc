//! Built-in experiment specs, one per experiment family.
//!
//! Walks start at genesis except in `scalability`, which measures walk
//! cost and so keeps the depth-sampled start.

use dagfl::datasets::{ClusteredConfig, FedProxConfig, Overlap};
use dagfl::simulation::PoisonConfig;
use dagfl::walk::{Normalization, Selector, WalkConfig, WalkStart};
use dagfl::TrainConfig;

use crate::spec::{Algorithm, DatasetSpec, ExperimentSpec, RunSpec, SCHEMA_VERSION};

pub struct Recipe {
    pub name: &'static str,
    pub about: &'static str,
    pub build: fn() -> ExperimentSpec,
}

pub const ALPHAS: [f64; 4] = [0.1, 1.0, 10.0, 100.0];

pub fn builtin_recipes() -> Vec<Recipe> {
    vec![
        Recipe {
            name: "alpha-sweep",
            about: "clustered blobs, alpha 0.1/1/10/100, simple normalization",
            build: || alpha_sweep("alpha-sweep", Normalization::Simple),
        },
        Recipe {
            name: "alpha-sweep-dynamic",
            about: "clustered blobs, alpha 0.1/1/10/100, spread-scaled normalization",
            build: || alpha_sweep("alpha-sweep-dynamic", Normalization::SpreadScaled),
        },
        Recipe {
            name: "relaxed-clusters",
            about: "15-20% of each client's data from foreign clusters, alpha 1/10/100",
            build: relaxed_clusters,
        },
        Recipe {
            name: "vs-fedavg",
            about: "clustered blobs, DAG at alpha 10 against FedAvg",
            build: vs_fedavg,
        },
        Recipe {
            name: "vs-fedprox",
            about: "FedProx synthetic (0.5, 0.5), DAG against FedAvg and FedProx",
            build: vs_fedprox,
        },
        Recipe {
            name: "poisoning",
            about: "labels 3 and 8 flipped after 100 clean rounds, p = 0/0.2/0.3 plus a uniform selector",
            build: poisoning,
        },
        Recipe {
            name: "scalability",
            about: "120 clients, 5/10/20/40 active per round, walk cost",
            build: scalability,
        },
    ]
}

pub fn recipe(name: &str) -> Option<ExperimentSpec> {
    builtin_recipes().into_iter().find(|r| r.name == name).map(|r| (r.build)())
}

fn genesis_walk(alpha: f64) -> WalkConfig {
    WalkConfig { alpha, start: WalkStart::Genesis, ..WalkConfig::default() }
}

fn base(name: &str, dataset: DatasetSpec, runs: Vec<RunSpec>) -> ExperimentSpec {
    ExperimentSpec {
        schema_version: SCHEMA_VERSION,
        name: name.into(),
        dataset,
        hidden_layers: None,
        rounds: 100,
        clients_per_round: 10,
        train: TrainConfig::default(),
        repetitions: 3,
        seed: 0,
        out_dir: None,
        runs,
    }
}

fn alpha_label(alpha: f64) -> String {
    format!("alpha-{alpha}")
}

fn alpha_sweep(name: &str, normalization: Normalization) -> ExperimentSpec {
    let runs = ALPHAS
        .iter()
        .map(|&a| RunSpec::dag(alpha_label(a), WalkConfig { normalization, ..genesis_walk(a) }))
        .collect();
    base(name, DatasetSpec::Clustered(ClusteredConfig::default()), runs)
}

fn relaxed_clusters() -> ExperimentSpec {
    let data = ClusteredConfig { overlap: Overlap::Uniform(0.15, 0.20), ..ClusteredConfig::default() };
    let runs = [1.0, 10.0, 100.0].iter().map(|&a| RunSpec::dag(alpha_label(a), genesis_walk(a))).collect();
    base("relaxed-clusters", DatasetSpec::Clustered(data), runs)
}

fn vs_fedavg() -> ExperimentSpec {
    base(
        "vs-fedavg",
        DatasetSpec::Clustered(ClusteredConfig::default()),
        vec![RunSpec::dag("dag", genesis_walk(10.0)), RunSpec::baseline("fedavg", Algorithm::Fedavg)],
    )
}

fn vs_fedprox() -> ExperimentSpec {
    let mut fedprox = RunSpec::baseline("fedprox", Algorithm::Fedprox);
    fedprox.proximal_mu = Some(0.1);
    let mut spec = base(
        "vs-fedprox",
        DatasetSpec::Fedprox(FedProxConfig::default()),
        vec![RunSpec::dag("dag", genesis_walk(10.0)), RunSpec::baseline("fedavg", Algorithm::Fedavg), fedprox],
    );
    spec.train.learning_rate = 0.01;
    spec
}

fn poisoning() -> ExperimentSpec {
    // one cluster over all classes
    let data = ClusteredConfig { clusters: vec![(0..10).collect()], twin_offset: None, ..ClusteredConfig::default() };
    let poisoned = |label: &str, fraction: f64, selector: Selector| {
        let mut run = RunSpec::dag(label, WalkConfig { selector, ..genesis_walk(10.0) });
        run.poison = Some(PoisonConfig { fraction, start_round: 100, flip_pair: (3, 8) });
        run
    };
    let mut spec = base(
        "poisoning",
        DatasetSpec::Clustered(data),
        vec![
            poisoned("p-0", 0.0, Selector::AccuracyBiased),
            poisoned("p-0.2", 0.2, Selector::AccuracyBiased),
            poisoned("p-0.3", 0.3, Selector::AccuracyBiased),
            poisoned("p-0.2-uniform", 0.2, Selector::UniformRandom),
        ],
    );
    spec.rounds = 200;
    spec
}

fn scalability() -> ExperimentSpec {
    let data = ClusteredConfig { num_clients: 120, ..ClusteredConfig::default() };
    let runs = [5, 10, 20, 40]
        .iter()
        .map(|&k| {
            let mut run = RunSpec::dag(format!("active-{k}"), WalkConfig { alpha: 10.0, ..WalkConfig::default() });
            run.clients_per_round = Some(k);
            run
        })
        .collect();
    base("scalability", DatasetSpec::Clustered(data), runs)
}
