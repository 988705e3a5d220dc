//! Synthetic federated datasets.
//!
//! * Clustered Gaussian blobs: classes are split into disjoint clusters and
//!   every client draws (mostly) from its own cluster's classes.
//! * The FedProx "synthetic(alpha, beta)" task, where each client has its
//!   own softmax labeling model and feature distribution.
//! * Label-flip poisoning.
//!
//! Every client keeps a 90:10 train/test split.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::{self, ModelParams};
use crate::rng::{stream, tag, SimRng};

/// Fraction of each client's samples held out for testing.
pub const TEST_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub cluster: usize,
    pub poisoned: bool,
}

impl ClientDataset {
    /// Shuffles `samples` and splits them 90:10.
    fn split<R: Rng + ?Sized>(client_id: usize, cluster: usize, mut samples: Vec<Sample>, rng: &mut R) -> Self {
        samples.shuffle(rng);
        let n = samples.len();
        let n_test = ((n as f64 * TEST_FRACTION).round() as usize).clamp(1, n - 1);
        let train = samples.split_off(n_test);
        ClientDataset { client_id, train, test: samples, cluster, poisoned: false }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.test)
    }
}

/// How much of a client's data comes from other clusters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overlap {
    Fixed(f64),
    /// Drawn per client, uniformly in `[lo, hi]`.
    Uniform(f64, f64),
}

impl Overlap {
    fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..1.0).contains(&v);
        match *self {
            Overlap::Fixed(v) if ok(v) => Ok(()),
            Overlap::Uniform(lo, hi) if ok(lo) && ok(hi) && lo <= hi => Ok(()),
            other => Err(Error::InvalidParameter(format!("overlap must lie in [0, 1): {other:?}"))),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Overlap::Fixed(v) => v,
            Overlap::Uniform(lo, hi) if lo == hi => lo,
            Overlap::Uniform(lo, hi) => rng.random_range(lo..=hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteredConfig {
    pub num_clients: usize,
    /// Disjoint class sets covering `0..num_classes`.
    pub clusters: Vec<Vec<usize>>,
    pub samples_per_client: usize,
    pub feature_dim: usize,
    pub overlap: Overlap,
    /// Standard deviation of the class means around the origin.
    pub mean_scale: f64,
    /// Standard deviation of samples around their class mean.
    pub spread: f64,
    /// When set, the i-th class of every cluster is drawn around a shared
    /// prototype with this standard deviation, so classes in different
    /// clusters are confusable while classes within a cluster stay apart.
    /// `None` draws every class mean independently.
    pub twin_offset: Option<f64>,
}

impl Default for ClusteredConfig {
    /// 30 clients in three clusters over ten classes: {0,1,2,3}, {4,5,6}, {7,8,9}.
    fn default() -> Self {
        ClusteredConfig {
            num_clients: 30,
            clusters: vec![vec![0, 1, 2, 3], vec![4, 5, 6], vec![7, 8, 9]],
            samples_per_client: 500,
            feature_dim: 20,
            overlap: Overlap::Fixed(0.0),
            mean_scale: 0.6,
            spread: 1.0,
            twin_offset: Some(0.15),
        }
    }
}

impl ClusteredConfig {
    pub fn num_classes(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.clusters.len();
        if k == 0 || self.clusters.iter().any(Vec::is_empty) {
            return Err(Error::InvalidPartition("every cluster needs at least one class".into()));
        }
        let c = self.num_classes();
        let mut seen = BTreeSet::new();
        for &class in self.clusters.iter().flatten() {
            if class >= c || !seen.insert(class) {
                return Err(Error::InvalidPartition(format!(
                    "classes must be a disjoint cover of 0..{c}, class {class} is out of range or repeated"
                )));
            }
        }
        if self.num_clients == 0 || !self.num_clients.is_multiple_of(k) {
            return Err(Error::InvalidPartition(format!(
                "{} clients cannot be split evenly over {k} clusters",
                self.num_clients
            )));
        }
        if self.samples_per_client < 2 || self.feature_dim == 0 {
            return Err(Error::InvalidParameter(
                "need >= 2 samples per client and a positive feature dimension".into(),
            ));
        }
        if !(self.spread > 0.0 && self.mean_scale > 0.0) {
            return Err(Error::InvalidParameter("mean_scale and spread must be positive".into()));
        }
        if self.twin_offset.is_some_and(|t| !(t >= 0.0 && t.is_finite())) {
            return Err(Error::InvalidParameter("twin_offset must be a non-negative number".into()));
        }
        self.overlap.validate()?;
        if k == 1 && self.overlap != Overlap::Fixed(0.0) {
            return Err(Error::InvalidParameter("overlap needs at least two clusters".into()));
        }
        Ok(())
    }

    /// Ground-truth cluster of a client.
    pub fn cluster_of(&self, client: usize) -> usize {
        client / (self.num_clients / self.clusters.len())
    }

    /// Class means, one per class, from the dataset seed.
    pub fn class_means(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream(&[seed, tag::DATA, 0]);
        let normal = Normal::new(0.0, self.mean_scale).unwrap();
        let draw = |rng: &mut SimRng| -> Vec<f64> { (0..self.feature_dim).map(|_| normal.sample(rng)).collect() };
        let Some(offset) = self.twin_offset else {
            return (0..self.num_classes()).map(|_| draw(&mut rng)).collect();
        };
        let width = self.clusters.iter().map(Vec::len).max().unwrap_or(0);
        let prototypes: Vec<Vec<f64>> = (0..width).map(|_| draw(&mut rng)).collect();
        let jitter = Normal::new(0.0, offset).unwrap();
        let mut means = vec![Vec::new(); self.num_classes()];
        for cluster in &self.clusters {
            for (pos, &class) in cluster.iter().enumerate() {
                means[class] = prototypes[pos].iter().map(|m| m + jitter.sample(&mut rng)).collect();
            }
        }
        means
    }
}

pub fn gen_clustered(cfg: &ClusteredConfig, seed: u64) -> Result<Vec<ClientDataset>> {
    cfg.validate()?;
    let means = cfg.class_means(seed);
    let num_classes = cfg.num_classes();
    (0..cfg.num_clients)
        .map(|client| {
            let mut rng = stream(&[seed, tag::DATA, 1, client as u64]);
            let cluster = cfg.cluster_of(client);
            let own = &cfg.clusters[cluster];
            let foreign: Vec<usize> = (0..num_classes).filter(|c| !own.contains(c)).collect();
            let overlap = cfg.overlap.draw(&mut rng);
            let n = cfg.samples_per_client;
            let n_foreign = (overlap * n as f64).round() as usize;
            let samples = (0..n)
                .map(|i| {
                    let pool = if i < n_foreign { &foreign } else { own };
                    let label = pool[rng.random_range(0..pool.len())];
                    let features = means[label]
                        .iter()
                        .map(|m| m + cfg.spread * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    Sample { features, label }
                })
                .collect();
            Ok(ClientDataset::split(client, cluster, samples, &mut rng))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleCount {
    Fixed(usize),
    /// `min + LogNormal(mu, sigma)`, as in the original synthetic benchmark.
    LogNormal { mu: f64, sigma: f64, min: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedProxConfig {
    /// Variation of the local labeling models across clients.
    pub alpha_het: f64,
    /// Variation of the local feature distributions across clients.
    pub beta_het: f64,
    pub num_clients: usize,
    pub samples: SampleCount,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Default for FedProxConfig {
    fn default() -> Self {
        FedProxConfig {
            alpha_het: 0.5,
            beta_het: 0.5,
            num_clients: 30,
            samples: SampleCount::Fixed(200),
            feature_dim: 60,
            num_classes: 10,
        }
    }
}

impl FedProxConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_het", self.alpha_het), ("beta_het", self.beta_het)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.num_clients == 0 || self.feature_dim == 0 || self.num_classes < 2 {
            return Err(Error::InvalidParameter(
                "need clients, a positive feature dimension and >= 2 classes".into(),
            ));
        }
        match self.samples {
            SampleCount::Fixed(n) if n >= 2 => Ok(()),
            SampleCount::LogNormal { sigma, min, .. } if sigma >= 0.0 && min >= 2 => Ok(()),
            other => Err(Error::InvalidParameter(format!("invalid sample count {other:?}"))),
        }
    }
}

/// Per-client hyper draws `(u_k, B_k)`: the mean of the labeling model
/// weights and the mean of the feature means.
pub fn fedprox_client_hyper(cfg: &FedProxConfig, seed: u64, client: usize) -> (f64, f64) {
    let mut rng = stream(&[seed, tag::DATA, 2, client as u64]);
    draw_hyper(cfg, &mut rng)
}

fn draw_hyper<R: Rng + ?Sized>(cfg: &FedProxConfig, rng: &mut R) -> (f64, f64) {
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    (cfg.alpha_het * z1, cfg.beta_het * z2)
}

pub fn gen_fedprox_synthetic(cfg: &FedProxConfig, seed: u64) -> Result<Vec<ClientDataset>> {
    cfg.validate()?;
    let (d, c) = (cfg.feature_dim, cfg.num_classes);
    // diagonal covariance j^-1.2, j = 1..=d
    let feature_std: Vec<f64> = (1..=d).map(|j| (j as f64).powf(-1.2).sqrt()).collect();
    (0..cfg.num_clients)
        .map(|client| {
            let mut rng = stream(&[seed, tag::DATA, 2, client as u64]);
            let (u, b_mean) = draw_hyper(cfg, &mut rng);
            let normal = |mean: f64, rng: &mut crate::rng::SimRng| mean + rng.sample::<f64, _>(StandardNormal);
            let weights: Vec<f64> = (0..c * d).map(|_| normal(u, &mut rng)).collect();
            let bias: Vec<f64> = (0..c).map(|_| normal(u, &mut rng)).collect();
            let centre: Vec<f64> = (0..d).map(|_| normal(b_mean, &mut rng)).collect();
            let n = match cfg.samples {
                SampleCount::Fixed(n) => n,
                SampleCount::LogNormal { mu, sigma, min } => {
                    min + LogNormal::new(mu, sigma).unwrap().sample(&mut rng) as usize
                }
            };
            let samples = (0..n)
                .map(|_| {
                    let features: Vec<f64> = centre
                        .iter()
                        .zip(&feature_std)
                        .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let logits: Vec<f64> = (0..c)
                        .map(|k| {
                            bias[k]
                                + weights[k * d..(k + 1) * d]
                                    .iter()
                                    .zip(&features)
                                    .map(|(w, x)| w * x)
                                    .sum::<f64>()
                        })
                        .collect();
                    // softmax is monotone, so its argmax is the logits' argmax
                    let label = learning::argmax(&logits);
                    Sample { features, label }
                })
                .collect();
            Ok(ClientDataset::split(client, client, samples, &mut rng))
        })
        .collect()
}

fn check_pair(class_a: usize, class_b: usize, num_classes: usize) -> Result<()> {
    for class in [class_a, class_b] {
        if class >= num_classes {
            return Err(Error::InvalidClass { class, num_classes });
        }
    }
    if class_a == class_b {
        return Err(Error::InvalidParameter(format!("flip pair needs two distinct classes, got {class_a} twice")));
    }
    Ok(())
}

/// Swaps two labels in train and test data and toggles the poisoned flag,
/// so applying the same flip twice restores the original dataset.
pub fn poison_flip_labels(
    ds: &ClientDataset,
    class_a: usize,
    class_b: usize,
    num_classes: usize,
) -> Result<ClientDataset> {
    check_pair(class_a, class_b, num_classes)?;
    let flip = |s: &Sample| Sample {
        features: s.features.clone(),
        label: if s.label == class_a {
            class_b
        } else if s.label == class_b {
            class_a
        } else {
            s.label
        },
    };
    Ok(ClientDataset {
        client_id: ds.client_id,
        train: ds.train.iter().map(flip).collect(),
        test: ds.test.iter().map(flip).collect(),
        cluster: ds.cluster,
        poisoned: !ds.poisoned,
    })
}

/// Among test samples of class `a` or `b` (clean labels), the fraction
/// predicted as the other class of the pair.
pub fn flipped_prediction_rate(params: &ModelParams, test: &[Sample], class_a: usize, class_b: usize) -> Result<f64> {
    check_pair(class_a, class_b, params.arch().num_classes())?;
    let mut relevant = 0usize;
    let mut flipped = 0usize;
    for s in test.iter().filter(|s| s.label == class_a || s.label == class_b) {
        relevant += 1;
        let other = if s.label == class_a { class_b } else { class_a };
        if learning::predict(params, &s.features) == other {
            flipped += 1;
        }
    }
    if relevant == 0 {
        return Err(Error::NoRelevantSamples);
    }
    Ok(flipped as f64 / relevant as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One line of the JSON-lines dataset format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub client: usize,
    pub split: Split,
    pub label: usize,
    pub features: Vec<f64>,
}

pub fn write_jsonl<W: Write>(clients: &[ClientDataset], mut out: W) -> std::io::Result<()> {
    for ds in clients {
        for (split, samples) in [(Split::Train, &ds.train), (Split::Test, &ds.test)] {
            for s in samples {
                let rec = SampleRecord {
                    client: ds.client_id,
                    split,
                    label: s.label,
                    features: s.features.clone(),
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

/// Reads the JSON-lines format back. The format carries no cluster
/// labels, so every client becomes its own cluster.
pub fn read_jsonl<R: BufRead>(input: R) -> std::io::Result<Vec<ClientDataset>> {
    let mut by_client: BTreeMap<usize, ClientDataset> = BTreeMap::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)?;
        let ds = by_client.entry(rec.client).or_insert_with(|| ClientDataset {
            client_id: rec.client,
            train: Vec::new(),
            test: Vec::new(),
            cluster: rec.client,
            poisoned: false,
        });
        let sample = Sample { features: rec.features, label: rec.label };
        match rec.split {
            Split::Train => ds.train.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    Ok(by_client.into_values().collect())
}
