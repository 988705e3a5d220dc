//! Accuracy-biased tip selection.
//!
//! A walk starts some distance behind the tips and moves towards them,
//! against the approval edges. At each step every child is scored on the
//! walker's local test data; the scores are shifted so the best child sits
//! at zero, multiplied by `alpha`, exponentiated and used as sampling
//! weights. Large `alpha` makes the walk follow the locally best models
//! (specialization), small `alpha` makes it close to uniform
//! (generalization).

use std::collections::HashMap;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dag::{Dag, TransactionId};
use crate::datasets::Sample;
use crate::error::{Error, Result};
use crate::learning::{self, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `acc - max(acc)`
    Simple,
    /// `(acc - max(acc)) / (max(acc) - min(acc))`, zero when all are equal.
    SpreadScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    AccuracyBiased,
    UniformRandom,
}

/// Where a walk begins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WalkStart {
    Genesis,
    /// Inclusive range of parent steps taken back from a uniform tip.
    Depth(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalkConfig {
    pub alpha: f64,
    pub normalization: Normalization,
    pub start: WalkStart,
    pub selector: Selector,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            alpha: 10.0,
            normalization: Normalization::Simple,
            start: WalkStart::Depth(15, 25),
            selector: Selector::AccuracyBiased,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if let WalkStart::Depth(lo, hi) = self.start {
            if lo < 1 || lo > hi {
                return Err(Error::InvalidConfig(format!(
                    "start depth must satisfy 1 <= min <= max, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WalkOutcome {
    pub tip: TransactionId,
    pub steps: usize,
    /// Children scored along the way (cache hits included).
    pub evaluations: usize,
    pub duration: f64,
}

fn extremes(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    }))
}

pub fn normalize_simple(accuracies: &[f64]) -> Result<Vec<f64>> {
    let (_, max) = extremes(accuracies)?;
    Ok(accuracies.iter().map(|a| a - max).collect())
}

pub fn normalize_spread_scaled(accuracies: &[f64]) -> Result<Vec<f64>> {
    let (min, max) = extremes(accuracies)?;
    let spread = max - min;
    if spread == 0.0 {
        return Ok(vec![0.0; accuracies.len()]);
    }
    Ok(accuracies.iter().map(|a| (a - max) / spread).collect())
}

/// Sampling distribution over children given their local accuracies.
pub fn walk_weights(accuracies: &[f64], alpha: f64, normalization: Normalization) -> Result<Vec<f64>> {
    let normalized = match normalization {
        Normalization::Simple => normalize_simple(accuracies)?,
        Normalization::SpreadScaled => normalize_spread_scaled(accuracies)?,
    };
    let mut weights: Vec<f64> = normalized.iter().map(|n| (n * alpha).exp()).collect();
    // the maximum maps to exp(0) = 1, so the sum is at least 1
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    Ok(weights)
}

/// Inverse-CDF draw from a probability vector.
pub fn weighted_choice<R: Rng + ?Sized>(probabilities: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    for (i, p) in probabilities.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return i;
        }
    }
    // rounding left u above the last cumulative sum
    probabilities
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probabilities.len() - 1)
}

/// Something that scores a transaction's model on local data.
pub trait Evaluator {
    fn accuracy(&mut self, id: TransactionId, params: &ModelParams) -> f64;
}

impl<F: FnMut(TransactionId, &ModelParams) -> f64> Evaluator for F {
    fn accuracy(&mut self, id: TransactionId, params: &ModelParams) -> f64 {
        self(id, params)
    }
}

/// Test-set accuracy with a per-transaction cache. Valid for one client
/// over one round, while the data does not change.
pub struct CachedEvaluator<'a> {
    data: &'a [Sample],
    cache: HashMap<TransactionId, f64>,
    computed: usize,
}

impl<'a> CachedEvaluator<'a> {
    pub fn new(data: &'a [Sample]) -> Self {
        CachedEvaluator { data, cache: HashMap::new(), computed: 0 }
    }

    /// Number of actual model evaluations (cache misses).
    pub fn computed(&self) -> usize {
        self.computed
    }
}

impl Evaluator for CachedEvaluator<'_> {
    fn accuracy(&mut self, id: TransactionId, params: &ModelParams) -> f64 {
        if let Some(&acc) = self.cache.get(&id) {
            return acc;
        }
        let acc = learning::evaluate(params, self.data)
            .map(|e| e.accuracy)
            .unwrap_or(0.0);
        self.computed += 1;
        self.cache.insert(id, acc);
        acc
    }
}

fn uniform_tip<R: Rng + ?Sized>(dag: &Dag, rng: &mut R) -> TransactionId {
    let tips = dag.tips();
    let idx = rng.random_range(0..tips.len());
    *tips.iter().nth(idx).unwrap()
}

/// Picks a uniform tip and steps back a uniform number of parent edges.
/// A genesis start uses no randomness.
pub fn sample_walk_start<R: Rng + ?Sized>(dag: &Dag, cfg: &WalkConfig, rng: &mut R) -> TransactionId {
    let WalkStart::Depth(lo, hi) = cfg.start else {
        return dag.genesis();
    };
    let mut current = uniform_tip(dag, rng);
    let depth = rng.random_range(lo..=hi);
    for _ in 0..depth {
        let parents = &dag.get(current).unwrap().parents;
        if parents.is_empty() {
            break;
        }
        current = parents[rng.random_range(0..parents.len())];
    }
    current
}

pub fn biased_random_walk<E: Evaluator + ?Sized, R: Rng + ?Sized>(
    dag: &Dag,
    start: TransactionId,
    evaluator: &mut E,
    cfg: &WalkConfig,
    rng: &mut R,
) -> Result<WalkOutcome> {
    let timer = Instant::now();
    let mut current = start;
    let mut steps = 0;
    let mut evaluations = 0;
    let mut accuracies = Vec::new();
    loop {
        let children = dag.children(current)?;
        if children.is_empty() {
            break;
        }
        accuracies.clear();
        for &child in children {
            accuracies.push(evaluator.accuracy(child, &dag.get(child)?.params));
        }
        evaluations += children.len();
        let weights = walk_weights(&accuracies, cfg.alpha, cfg.normalization)?;
        current = children[weighted_choice(&weights, rng)];
        steps += 1;
    }
    Ok(WalkOutcome {
        tip: current,
        steps,
        evaluations,
        duration: timer.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TipSelection {
    pub tips: (TransactionId, TransactionId),
    /// Empty for the uniform selector.
    pub walks: Vec<WalkOutcome>,
}

/// Two independent walks, or two uniform tips for the random selector.
pub fn select_tips<E: Evaluator + ?Sized, R: Rng + ?Sized>(
    dag: &Dag,
    evaluator: &mut E,
    cfg: &WalkConfig,
    rng: &mut R,
) -> Result<TipSelection> {
    match cfg.selector {
        Selector::UniformRandom => {
            let a = uniform_tip(dag, rng);
            let b = uniform_tip(dag, rng);
            Ok(TipSelection { tips: (a, b), walks: Vec::new() })
        }
        Selector::AccuracyBiased => {
            let mut walks = Vec::with_capacity(2);
            for _ in 0..2 {
                let start = sample_walk_start(dag, cfg, rng);
                walks.push(biased_random_walk(dag, start, evaluator, cfg, rng)?);
            }
            Ok(TipSelection { tips: (walks[0].tip, walks[1].tip), walks })
        }
    }
}

/// Average of the two tips selected for `(a, b)`.
pub fn average_tips(dag: &Dag, tips: (TransactionId, TransactionId)) -> Result<ModelParams> {
    let a = &dag.get(tips.0)?.params;
    if tips.0 == tips.1 {
        return Ok(a.clone());
    }
    learning::average(a, &dag.get(tips.1)?.params)
}

#[derive(Debug, Clone)]
pub struct Reference {
    pub selection: TipSelection,
    pub params: ModelParams,
}

/// The model a client compares its fresh update against: the average of
/// a new pair of tips picked by the client's own selector.
pub fn reference_model<E: Evaluator + ?Sized, R: Rng + ?Sized>(
    dag: &Dag,
    evaluator: &mut E,
    cfg: &WalkConfig,
    rng: &mut R,
) -> Result<Reference> {
    let selection = select_tips(dag, evaluator, cfg, rng)?;
    let params = average_tips(dag, selection.tips)?;
    Ok(Reference { selection, params })
}
