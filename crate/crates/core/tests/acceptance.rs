//! Acceptance suite. Runs every criterion in sequence, prints one
//! PASS/FAIL line each and exits non-zero if any failed.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p dagfl --test acceptance -- 1 2 4`.

use std::collections::BTreeMap;
use std::time::Instant;

use dagfl::baselines::{run_baseline, BaselineResult, FedConfig};
use dagfl::dag::Dag;
use dagfl::datasets::{gen_clustered, gen_fedprox_synthetic, ClientDataset, ClusteredConfig, FedProxConfig, Sample};
use dagfl::learning::{self, Architecture, ModelParams};
use dagfl::metrics::{self, ClientGraph, Partition};
use dagfl::rng::stream;
use dagfl::simulation::{protocol_violations, run_simulation, PoisonConfig, RoundRecord, SimConfig, SimulationResult};
use dagfl::walk::{self, Normalization, Selector, WalkConfig, WalkStart};
use rand::Rng;

const REPS: u64 = 3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Every simulation run by the suite goes through here so the protocol
/// checks see all of them.
#[derive(Default)]
struct Runs {
    simulations: usize,
    violations: Vec<String>,
}

impl Runs {
    fn simulate(&mut self, clients: &[ClientDataset], arch: &Architecture, cfg: &SimConfig) -> SimulationResult {
        let result = run_simulation(clients, arch, cfg).expect("simulation failed");
        self.simulations += 1;
        for v in protocol_violations(&result, cfg.clients_per_round) {
            self.violations.push(format!("seed {}: {v}", cfg.seed));
        }
        result
    }
}

fn clustered(seed: u64) -> Vec<ClientDataset> {
    gen_clustered(&ClusteredConfig::default(), seed).unwrap()
}

fn blob_arch() -> Architecture {
    let d = ClusteredConfig::default();
    Architecture::default_for(d.feature_dim, d.num_classes()).unwrap()
}

fn dag_config(alpha: f64, seed: u64) -> SimConfig {
    SimConfig {
        seed,
        walk: WalkConfig { alpha, start: WalkStart::Genesis, ..WalkConfig::default() },
        ..SimConfig::default()
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Mean of `f` over rounds `from..=to` (1-based).
fn window(rounds: &[RoundRecord], from: usize, to: usize, f: impl Fn(&RoundRecord) -> f64) -> f64 {
    mean(rounds[from - 1..to].iter().map(f))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn equations() -> Outcome {
    let mut fails = Vec::new();
    let acc = [0.9, 0.8, 0.7];
    if !close(&walk::normalize_simple(&acc).unwrap(), &[0.0, -0.1, -0.2], 1e-12) {
        fails.push("simple normalization");
    }
    if !close(&walk::normalize_spread_scaled(&acc).unwrap(), &[0.0, -0.5, -1.0], 1e-12) {
        fails.push("spread-scaled normalization");
    }
    if !close(&walk::normalize_spread_scaled(&[0.4; 3]).unwrap(), &[0.0; 3], 0.0) {
        fails.push("zero spread");
    }
    let z = 1.0 + (-1f64).exp() + (-2f64).exp();
    let exact = [1.0 / z, (-1f64).exp() / z, (-2f64).exp() / z];
    let w = walk::walk_weights(&acc, 10.0, Normalization::Simple).unwrap();
    if !close(&w, &exact, 1e-6) || !close(&w, &[0.6652, 0.2447, 0.0900], 5e-5) {
        fails.push("weights for [0.9, 0.8, 0.7] at alpha 10");
    }

    let mut rng = stream(&[1001]);
    let mut invariance_cases = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..8);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let alpha = rng.random_range(0.1..50.0);
        let c = rng.random_range(-0.5..0.5);
        let k = rng.random_range(0.1..3.0);
        let shifted: Vec<f64> = a.iter().map(|x| x + c).collect();
        let affine: Vec<f64> = a.iter().map(|x| k * x + c).collect();
        let base = walk::walk_weights(&a, alpha, Normalization::Simple).unwrap();
        let spread = walk::walk_weights(&a, alpha, Normalization::SpreadScaled).unwrap();
        let ok = close(&base, &walk::walk_weights(&shifted, alpha, Normalization::Simple).unwrap(), 1e-9)
            && close(&spread, &walk::walk_weights(&affine, alpha, Normalization::SpreadScaled).unwrap(), 1e-9)
            && (base.iter().sum::<f64>() - 1.0).abs() <= 1e-12
            && base.iter().all(|&p| p > 0.0);
        if ok {
            invariance_cases += 1;
        }
    }
    if invariance_cases != 1000 {
        fails.push("invariances");
    }
    outcome(
        fails.is_empty(),
        format!("weights {w:.6?}, invariances held on {invariance_cases}/1000 inputs, failures {fails:?}"),
    )
}

fn fork_oracle() -> Outcome {
    let arch = Architecture::new(vec![1, 1]).unwrap();
    let params = ModelParams::zeros(&arch);
    let mut dag = Dag::create_genesis(params.clone());
    let g = dag.genesis();
    let a = dag.add_transaction((g, g), params.clone(), 0, 1, false).unwrap();
    let b = dag.add_transaction((g, g), params, 1, 1, false).unwrap();
    let mut evaluator = |id: dagfl::TransactionId, _: &ModelParams| if id == a { 0.9 } else if id == b { 0.7 } else { 0.0 };
    let cfg = WalkConfig { alpha: 10.0, normalization: Normalization::Simple, ..WalkConfig::default() };
    let mut rng = stream(&[1002]);
    let n = 100_000;
    let hits = (0..n)
        .filter(|_| walk::biased_random_walk(&dag, g, &mut evaluator, &cfg, &mut rng).unwrap().tip == a)
        .count();
    let freq = hits as f64 / n as f64;
    let expected = 1.0 / (1.0 + (-2f64).exp());
    outcome(
        (freq - expected).abs() <= 0.01,
        format!("P(a) observed {freq:.4}, closed form {expected:.4}, {n} walks"),
    )
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn central_difference(params: &ModelParams, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..params.values().len())
        .map(|i| {
            let mut plus = params.clone();
            plus.values_mut()[i] += h;
            let mut minus = params.clone();
            minus.values_mut()[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

/// Random weights and biases. Zero biases put pre-activations exactly on the
/// ReLU kink whenever a whole hidden layer is dead.
fn generic_params(arch: &Architecture, rng: &mut impl Rng) -> ModelParams {
    let values = (0..arch.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    ModelParams::new(arch.clone(), values).unwrap()
}

fn gradient_check() -> Outcome {
    let mut rng = stream(&[1003]);
    let mut worst_ce: f64 = 0.0;
    let mut worst_prox: f64 = 0.0;
    for _ in 0..20 {
        let mut sizes = vec![rng.random_range(2..6)];
        for _ in 0..rng.random_range(1..3) {
            sizes.push(rng.random_range(2..7));
        }
        let classes = rng.random_range(2..5);
        sizes.push(classes);
        let arch = Architecture::new(sizes.clone()).unwrap();
        let params = generic_params(&arch, &mut rng);
        let batch: Vec<Sample> = (0..rng.random_range(1..9))
            .map(|_| Sample {
                features: (0..sizes[0]).map(|_| rng.random_range(-2.0..2.0)).collect(),
                label: rng.random_range(0..classes),
            })
            .collect();
        let analytic = learning::gradient(&params, &batch).unwrap();
        let numeric = central_difference(&params, |p| learning::loss(p, &batch).unwrap());
        worst_ce = worst_ce.max(rel_error(&analytic, &numeric));

        let anchor = generic_params(&arch, &mut rng);
        let mu = rng.random_range(0.01..1.0);
        let stepped = dagfl::baselines::fedprox_local_step(&params, &anchor, &batch, 1.0, mu).unwrap();
        let prox: Vec<f64> = params.values().iter().zip(stepped.values()).map(|(w, s)| w - s).collect();
        let numeric = central_difference(&params, |p| {
            dagfl::baselines::proximal_objective(p, &anchor, &batch, mu).unwrap()
        });
        worst_prox = worst_prox.max(rel_error(&prox, &numeric));
    }
    outcome(
        worst_ce <= 1e-4 && worst_prox <= 1e-4,
        format!("20 nets, worst relative error {worst_ce:.2e} (cross-entropy), {worst_prox:.2e} (proximal)"),
    )
}

fn brute_force_best(g: &ClientGraph) -> f64 {
    fn rec(prefix: &mut Vec<usize>, ids: &[usize], g: &ClientGraph, best: &mut f64) {
        if prefix.len() == ids.len() {
            let part: Partition = ids.iter().copied().zip(prefix.iter().copied()).collect();
            *best = best.max(metrics::modularity(g, &part).unwrap());
            return;
        }
        let max = prefix.iter().copied().max().map_or(0, |m| m + 1);
        for c in 0..=max {
            prefix.push(c);
            rec(prefix, ids, g, best);
            prefix.pop();
        }
    }
    let ids: Vec<usize> = g.nodes().iter().copied().collect();
    let mut best = f64::NEG_INFINITY;
    rec(&mut Vec::new(), &ids, g, &mut best);
    best
}

fn louvain_oracle() -> Outcome {
    let mut rng = stream(&[1004]);
    let mut worst = f64::INFINITY;
    let mut below = 0;
    let mut graphs = 0;
    while graphs < 200 {
        let n = rng.random_range(2..=8);
        let mut g = ClientGraph::new();
        for v in 0..n {
            g.add_node(v);
        }
        for a in 0..n {
            for b in a + 1..n {
                if rng.random_bool(0.5) {
                    g.add_weight(a, b, rng.random_range(1..=5));
                }
            }
        }
        if g.total_weight() == 0 {
            continue;
        }
        graphs += 1;
        let best = brute_force_best(&g);
        let found = metrics::modularity(&g, &metrics::louvain(&g).unwrap()).unwrap();
        let ok = if best > 0.0 { found >= 0.95 * best } else { found >= best - 1e-12 };
        if !ok {
            below += 1;
        }
        if best > 1e-12 {
            worst = worst.min(found / best);
        }
    }

    let mut cliques = ClientGraph::new();
    for offset in [0, 4] {
        for a in 0..4 {
            for b in a + 1..4 {
                cliques.add_weight(offset + a, offset + b, 1);
            }
        }
    }
    let part = metrics::louvain(&cliques).unwrap();
    let split = metrics::num_communities(&part) == 2
        && (0..4).all(|v| part[&v] == part[&0])
        && (4..8).all(|v| part[&v] == part[&4])
        && part[&0] != part[&4];
    outcome(
        below == 0 && split,
        format!("{graphs} graphs, {below} below 0.95x optimum, worst ratio {worst:.4}; clique pair split: {split}"),
    )
}

/// Runs shared by the specialization, ordering and FedAvg criteria.
struct ClusteredRuns {
    alpha10: Vec<SimulationResult>,
    alpha1: Vec<SimulationResult>,
    alpha01: Vec<SimulationResult>,
    fedavg: Vec<BaselineResult>,
    seconds: BTreeMap<&'static str, f64>,
}

fn clustered_runs(runs: &mut Runs) -> ClusteredRuns {
    let arch = blob_arch();
    let mut out = ClusteredRuns {
        alpha10: Vec::new(),
        alpha1: Vec::new(),
        alpha01: Vec::new(),
        fedavg: Vec::new(),
        seconds: BTreeMap::new(),
    };
    for seed in 0..REPS {
        let data = clustered(seed);
        for (name, alpha) in [("alpha 10", 10.0), ("alpha 1", 1.0), ("alpha 0.1", 0.1)] {
            let t = Instant::now();
            let r = runs.simulate(&data, &arch, &dag_config(alpha, seed));
            *out.seconds.entry(name).or_default() += t.elapsed().as_secs_f64() / REPS as f64;
            match name {
                "alpha 10" => out.alpha10.push(r),
                "alpha 1" => out.alpha1.push(r),
                _ => out.alpha01.push(r),
            }
        }
        let t = Instant::now();
        out.fedavg.push(run_baseline(&data, &arch, &FedConfig { seed, ..FedConfig::default() }).unwrap());
        *out.seconds.entry("fedavg").or_default() += t.elapsed().as_secs_f64() / REPS as f64;
    }
    out
}

fn specialization(c: &ClusteredRuns) -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    for (rep, r) in c.alpha10.iter().enumerate() {
        let last = &r.metrics[99];
        let pureness = last.approval_pureness.unwrap_or(0.0);
        let modularity: Vec<f64> = r.metrics[50..100].iter().map(|m| m.modularity.unwrap_or(f64::NAN)).collect();
        let windows: Vec<f64> = modularity.chunks(10).map(|w| mean(w.iter().copied())).collect();
        let positive = modularity.iter().all(|&q| q > 0.0);
        let non_decreasing = windows.windows(2).all(|w| w[1] >= w[0]);
        let ok = pureness >= 0.9 && last.misclassification <= 0.1 && positive && non_decreasing;
        pass &= ok;
        lines.push(format!(
            "rep {rep} alpha 10: pureness {pureness:.3}, misclassification {:.2}, modularity windows {windows:.3?}",
            last.misclassification
        ));
    }
    for (rep, r) in c.alpha1.iter().enumerate() {
        let pureness = r.metrics[99].approval_pureness.unwrap_or(0.0);
        pass &= (0.33..=0.8).contains(&pureness);
        lines.push(format!("rep {rep} alpha 1: pureness {pureness:.3}"));
    }
    let runtime = c.seconds["alpha 10"].max(c.seconds["alpha 1"]);
    pass &= runtime < 300.0;
    lines.push(format!("slowest configuration {runtime:.1}s per run"));
    outcome(pass, lines.join("; "))
}

fn alpha_ordering(c: &ClusteredRuns) -> Outcome {
    let at50 = |runs: &[SimulationResult]| -> Vec<f64> {
        runs.iter().map(|r| window(&r.rounds, 46, 50, |x| x.mean_accuracy)).collect()
    };
    let high = at50(&c.alpha10);
    let low = at50(&c.alpha01);
    let (mh, ml) = (mean(high.iter().copied()), mean(low.iter().copied()));
    outcome(
        mh > ml,
        format!("rounds 46-50 accuracy, alpha 10 {mh:.4} {high:.3?} vs alpha 0.1 {ml:.4} {low:.3?}"),
    )
}

fn fedavg_comparison(c: &ClusteredRuns) -> Outcome {
    let mut good = 0;
    let mut lines = Vec::new();
    for (rep, (d, f)) in c.alpha10.iter().zip(&c.fedavg).enumerate() {
        let (dr, fr) = (&d.rounds[99], &f.rounds[99]);
        let ok = dr.mean_accuracy >= fr.mean_accuracy && dr.accuracy_std() <= fr.accuracy_std();
        good += ok as usize;
        lines.push(format!(
            "rep {rep}: dag {:.3}±{:.3}, fedavg {:.3}±{:.3}",
            dr.mean_accuracy,
            dr.accuracy_std(),
            fr.mean_accuracy,
            fr.accuracy_std()
        ));
    }
    outcome(good * 2 > c.alpha10.len(), format!("{good}/{} reps satisfy both; {}", c.alpha10.len(), lines.join("; ")))
}

fn fedprox_comparison(runs: &mut Runs) -> Outcome {
    let cfg = FedProxConfig::default();
    let arch = Architecture::default_for(cfg.feature_dim, cfg.num_classes).unwrap();
    let lr = 0.01;
    let mut losses: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 0..REPS {
        let data = gen_fedprox_synthetic(&cfg, seed).unwrap();
        let mut sim = dag_config(10.0, seed);
        sim.train.learning_rate = lr;
        let r = runs.simulate(&data, &arch, &sim);
        losses.entry("dag").or_default().push(window(&r.rounds, 91, 100, |x| x.mean_loss));
        for (name, mu) in [("fedavg", 0.0), ("fedprox", 0.1)] {
            let mut fc = FedConfig { seed, proximal_mu: mu, ..FedConfig::default() };
            fc.train.learning_rate = lr;
            let b = run_baseline(&data, &arch, &fc).unwrap();
            losses.entry(name).or_default().push(window(&b.rounds, 91, 100, |x| x.mean_loss));
        }
    }
    let m = |k: &str| mean(losses[k].iter().copied());
    outcome(
        m("dag") <= m("fedavg"),
        format!(
            "rounds 91-100 loss: dag {:.4} {:.3?}, fedavg {:.4} {:.3?}, fedprox(mu 0.1) {:.4}",
            m("dag"),
            losses["dag"],
            m("fedavg"),
            losses["fedavg"],
            m("fedprox")
        ),
    )
}

fn poisoning(runs: &mut Runs) -> Outcome {
    let data_cfg = ClusteredConfig { clusters: vec![(0..10).collect()], twin_offset: None, ..ClusteredConfig::default() };
    let data = gen_clustered(&data_cfg, 0).unwrap();
    let arch = blob_arch();
    let config = |fraction: f64, selector: Selector| SimConfig {
        rounds: 200,
        walk: WalkConfig { selector, ..dag_config(10.0, 0).walk },
        poison: Some(PoisonConfig { fraction, start_round: 100, flip_pair: (3, 8) }),
        ..dag_config(10.0, 0)
    };
    let benign = |r: &SimulationResult| mean(r.metrics[180..200].iter().filter_map(|m| m.flipped_rate_benign));

    let accurate = runs.simulate(&data, &arch, &config(0.3, Selector::AccuracyBiased));
    let uniform = runs.simulate(&data, &arch, &config(0.2, Selector::UniformRandom));
    let graph = metrics::build_client_graph(&accurate.dag);
    let part = metrics::louvain(&graph).unwrap();
    let dist = metrics::poisoned_cluster_distribution(&part, &accurate.poisoned_clients);
    let contained = metrics::containment_fraction(&dist).unwrap_or(0.0);
    let (fa, fu) = (benign(&accurate), benign(&uniform));
    outcome(
        fa <= 0.3 && contained >= 0.6 && fa <= fu,
        format!(
            "benign flipped rate rounds 181-200: accuracy p=0.3 {fa:.3}, uniform p=0.2 {fu:.3}; \
             {:.0}% of {} poisoned clients in majority-poisoned communities {:?}",
            contained * 100.0,
            accurate.poisoned_clients.len(),
            dist.values().collect::<Vec<_>>()
        ),
    )
}

fn scalability(runs: &mut Runs) -> Outcome {
    let data_cfg = ClusteredConfig { num_clients: 120, ..ClusteredConfig::default() };
    let data = gen_clustered(&data_cfg, 0).unwrap();
    let arch = blob_arch();
    let mut per_walk = BTreeMap::new();
    for active in [5, 40] {
        let cfg = SimConfig { clients_per_round: active, seed: 0, ..SimConfig::default() };
        let r = runs.simulate(&data, &arch, &cfg);
        let (evals, walks) = r.rounds[49..100]
            .iter()
            .flat_map(|x| &x.clients)
            .fold((0, 0), |(e, w), c| (e + c.walk_evaluations, w + c.walks));
        per_walk.insert(active, evals as f64 / walks as f64);
    }
    let ratio = per_walk[&40] / per_walk[&5];
    outcome(
        ratio <= 1.5,
        format!(
            "evaluations per walk rounds 50-100: 5 active {:.2}, 40 active {:.2}, ratio {ratio:.3}",
            per_walk[&5], per_walk[&40]
        ),
    )
}

fn fingerprint(r: &SimulationResult) -> (Vec<u8>, Vec<RoundRecord>, String) {
    let mut export = Vec::new();
    r.dag.write_jsonl(&mut export, true).unwrap();
    let mut rounds = r.rounds.clone();
    for c in rounds.iter_mut().flat_map(|x| x.clients.iter_mut()) {
        c.walk_duration = 0.0;
    }
    (export, rounds, format!("{:?}", r.metrics))
}

fn protocol(runs: &mut Runs, c: &ClusteredRuns) -> Outcome {
    let data = clustered(0);
    let again = runs.simulate(&data, &blob_arch(), &dag_config(10.0, 0));
    let same = fingerprint(&again) == fingerprint(&c.alpha10[0]);
    outcome(
        runs.violations.is_empty() && same,
        format!(
            "{} simulations checked, {} violations{}; rerun identical: {same}",
            runs.simulations,
            runs.violations.len(),
            runs.violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!("[{}] {n:>2} {name} ({secs:.1}s): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o, secs));
    };

    if want(1) {
        record(1, "equation unit suite", &mut || {
            let t = Instant::now();
            let o = equations();
            let secs = t.elapsed().as_secs_f64();
            outcome(o.pass && secs < 1.0, o.detail)
        });
    }
    if want(2) {
        record(2, "walk fork oracle", &mut || {
            let t = Instant::now();
            let o = fork_oracle();
            outcome(o.pass && t.elapsed().as_secs_f64() < 10.0, o.detail)
        });
    }
    if want(3) {
        record(3, "gradient check", &mut || {
            let t = Instant::now();
            let o = gradient_check();
            outcome(o.pass && t.elapsed().as_secs_f64() < 10.0, o.detail)
        });
    }
    if want(4) {
        record(4, "louvain oracle", &mut || {
            let t = Instant::now();
            let o = louvain_oracle();
            outcome(o.pass && t.elapsed().as_secs_f64() < 60.0, o.detail)
        });
    }

    let mut runs = Runs::default();
    let needs_clustered = [5, 6, 7, 11].iter().any(|&n| want(n));
    let shared = needs_clustered.then(|| {
        let t = Instant::now();
        let c = clustered_runs(&mut runs);
        println!("       clustered runs ready ({:.1}s, per-run seconds {:.1?})", t.elapsed().as_secs_f64(), c.seconds);
        c
    });
    if let Some(c) = &shared {
        if want(5) {
            record(5, "specialization emergence", &mut || specialization(c));
        }
        if want(6) {
            record(6, "alpha accuracy ordering", &mut || alpha_ordering(c));
        }
        if want(7) {
            record(7, "fedavg comparison", &mut || fedavg_comparison(c));
        }
    }
    if want(8) {
        record(8, "fedprox comparison", &mut || fedprox_comparison(&mut runs));
    }
    if want(9) {
        record(9, "poisoning containment", &mut || poisoning(&mut runs));
    }
    if want(10) {
        record(10, "scalability shape", &mut || scalability(&mut runs));
    }
    if let (true, Some(c)) = (want(11), &shared) {
        record(11, "protocol invariants", &mut || protocol(&mut runs, c));
    }

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
