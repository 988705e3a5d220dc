//! Specialization and robustness metrics.
//!
//! The client graph links two clients with one unit of weight for every
//! approval edge between their transactions. Communities in that graph are
//! found with Louvain and compared against the ground-truth clusters.
//! Approvals of genesis carry no client identity and are skipped
//! everywhere. A client approving its own earlier transaction becomes a
//! self-loop: it counts as a pure approval and adds to the client's degree,
//! but never pulls the client towards another community.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dag::{Dag, TransactionId};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientGraph {
    nodes: BTreeSet<usize>,
    /// Keyed by `(min, max)`.
    weights: BTreeMap<(usize, usize), u64>,
}

impl ClientGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, node: usize) {
        self.nodes.insert(node);
    }

    pub fn add_weight(&mut self, a: usize, b: usize, w: u64) {
        self.nodes.insert(a);
        self.nodes.insert(b);
        *self.weights.entry((a.min(b), a.max(b))).or_insert(0) += w;
    }

    pub fn weight(&self, a: usize, b: usize) -> u64 {
        self.weights.get(&(a.min(b), a.max(b))).copied().unwrap_or(0)
    }

    pub fn nodes(&self) -> &BTreeSet<usize> {
        &self.nodes
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.weights.iter().map(|(&(a, b), &w)| (a, b, w))
    }

    pub fn total_weight(&self) -> u64 {
        self.weights.values().sum()
    }

    /// Sum of node degrees; a self-loop adds twice its weight.
    pub fn degree_sum(&self) -> u64 {
        self.weights.values().map(|w| 2 * w).sum()
    }
}

/// Client id -> community id.
pub type Partition = BTreeMap<usize, usize>;

/// Iterates `(publisher, parent_publisher)` for every approval edge whose
/// parent is not genesis. Duplicate parents yield two edges.
fn approval_edges(dag: &Dag) -> impl Iterator<Item = (usize, usize)> + '_ {
    dag.transactions().flat_map(move |t| {
        let from = t.publisher;
        t.parents.iter().filter_map(move |&p| {
            let to = dag.get(p).ok()?.publisher?;
            Some((from?, to))
        })
    })
}

pub fn build_client_graph(dag: &Dag) -> ClientGraph {
    let mut g = ClientGraph::new();
    for t in dag.transactions() {
        if let Some(p) = t.publisher {
            g.add_node(p);
        }
    }
    for (a, b) in approval_edges(dag) {
        g.add_weight(a, b, 1);
    }
    g
}

/// Dense weighted graph used by modularity and Louvain.
#[derive(Debug, Clone)]
struct Dense {
    adj: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
    degree: Vec<f64>,
    /// Total edge weight.
    m: f64,
}

impl Dense {
    fn from_edges(n: usize, edges: impl Iterator<Item = (usize, usize, f64)>) -> Self {
        let mut adj = vec![Vec::new(); n];
        let mut self_loops = vec![0.0; n];
        let mut degree = vec![0.0; n];
        let mut m = 0.0;
        for (a, b, w) in edges {
            m += w;
            degree[a] += w;
            degree[b] += w;
            if a == b {
                self_loops[a] += w;
            } else {
                adj[a].push((b, w));
                adj[b].push((a, w));
            }
        }
        Dense { adj, self_loops, degree, m }
    }

    fn modularity(&self, community: &[usize]) -> f64 {
        let k = community.iter().copied().max().map_or(0, |c| c + 1);
        let mut internal = vec![0.0; k];
        let mut total = vec![0.0; k];
        for i in 0..self.adj.len() {
            let c = community[i];
            total[c] += self.degree[i];
            internal[c] += self.self_loops[i];
            for &(j, w) in &self.adj[i] {
                if community[j] == c && j > i {
                    internal[c] += w;
                }
            }
        }
        let two_m = 2.0 * self.m;
        (0..k)
            .map(|c| internal[c] / self.m - (total[c] / two_m).powi(2))
            .sum()
    }
}

fn index_graph(g: &ClientGraph) -> (Vec<usize>, Dense) {
    let ids: Vec<usize> = g.nodes.iter().copied().collect();
    let pos: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let dense = Dense::from_edges(
        ids.len(),
        g.edges().map(|(a, b, w)| (pos[&a], pos[&b], w as f64)),
    );
    (ids, dense)
}

/// Newman modularity of a weighted partition.
pub fn modularity(g: &ClientGraph, part: &Partition) -> Result<f64> {
    if g.total_weight() == 0 {
        return Err(Error::EmptyGraph);
    }
    let (ids, dense) = index_graph(g);
    let mut labels: BTreeMap<usize, usize> = BTreeMap::new();
    let community: Vec<usize> = ids
        .iter()
        .map(|id| {
            let c = part.get(id).copied().unwrap_or(usize::MAX - id);
            let next = labels.len();
            *labels.entry(c).or_insert(next)
        })
        .collect();
    Ok(dense.modularity(&community))
}

/// One local-moving phase. Returns whether any node changed community.
fn local_moves(graph: &Dense, community: &mut [usize], order: &[usize]) -> bool {
    let n = graph.adj.len();
    let mut total: Vec<f64> = vec![0.0; n];
    let mut members: Vec<usize> = vec![0; n];
    for i in 0..n {
        total[community[i]] += graph.degree[i];
        members[community[i]] += 1;
    }
    let m = graph.m;
    let mut links: BTreeMap<usize, f64> = BTreeMap::new();
    let mut moved_any = false;
    loop {
        let mut moved = false;
        for &i in order {
            let current = community[i];
            let k_i = graph.degree[i];
            links.clear();
            links.insert(current, 0.0);
            for &(j, w) in &graph.adj[i] {
                if j != i {
                    *links.entry(community[j]).or_insert(0.0) += w;
                }
            }
            total[current] -= k_i;
            members[current] -= 1;
            let gain = |c: usize, k_in: f64| k_in / m - total[c] * k_i / (2.0 * m * m);
            let mut best = (current, gain(current, links[&current]));
            for (&c, &k_in) in &links {
                let g = gain(c, k_in);
                if g > best.1 + 1e-12 {
                    best = (c, g);
                }
            }
            // an empty community has zero gain
            if best.1 < -1e-12 && members[current] > 0 {
                if let Some(empty) = members.iter().position(|&k| k == 0) {
                    best = (empty, 0.0);
                }
            }
            total[best.0] += k_i;
            members[best.0] += 1;
            if best.0 != current {
                community[i] = best.0;
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            return moved_any;
        }
    }
}

fn renumber(community: &mut [usize]) -> usize {
    let mut map = BTreeMap::new();
    for c in community.iter_mut() {
        let next = map.len();
        *c = *map.entry(*c).or_insert(next);
    }
    map.len()
}

fn aggregate(graph: &Dense, community: &[usize], k: usize) -> Dense {
    let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..graph.adj.len() {
        let ci = community[i];
        if graph.self_loops[i] > 0.0 {
            *edges.entry((ci, ci)).or_insert(0.0) += graph.self_loops[i];
        }
        for &(j, w) in &graph.adj[i] {
            if j > i {
                let cj = community[j];
                *edges.entry((ci.min(cj), ci.max(cj))).or_insert(0.0) += w;
            }
        }
    }
    Dense::from_edges(k, edges.into_iter().map(|((a, b), w)| (a, b, w)))
}

fn visiting_order<R: Rng + ?Sized>(n: usize, rng: Option<&mut R>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(r) = rng {
        order.shuffle(r);
    }
    order
}

/// Local moving and aggregation until no level changes, starting from the
/// communities in `membership`.
fn multilevel<R: Rng + ?Sized>(graph: &Dense, membership: &mut [usize], mut rng: Option<&mut R>) {
    let k = renumber(membership);
    let mut level = aggregate(graph, membership, k);
    loop {
        let size = level.adj.len();
        let mut community: Vec<usize> = (0..size).collect();
        let order = visiting_order(size, rng.as_deref_mut());
        if !local_moves(&level, &mut community, &order) {
            break;
        }
        let k = renumber(&mut community);
        for m in membership.iter_mut() {
            *m = community[*m];
        }
        level = aggregate(&level, &community, k);
        if k == size {
            break;
        }
    }
}

/// Louvain with a refinement pass: once the levels converge, original
/// nodes may move again, and any move restarts the aggregation.
fn louvain_dense<R: Rng + ?Sized>(graph: &Dense, mut membership: Vec<usize>, mut rng: Option<&mut R>) -> Vec<usize> {
    let n = graph.adj.len();
    loop {
        multilevel(graph, &mut membership, rng.as_deref_mut());
        let order = visiting_order(n, rng.as_deref_mut());
        if !local_moves(graph, &mut membership, &order) {
            break;
        }
    }
    renumber(&mut membership);
    membership
}

fn to_partition(ids: &[usize], membership: &[usize]) -> Partition {
    ids.iter().copied().zip(membership.iter().copied()).collect()
}

/// Extra Louvain runs made by [`louvain`], with shuffled visiting orders
/// and every other one starting from a random coarse partition. A single
/// greedy pass can get stuck on small graphs (a weighted path of four nodes
/// collapses into one community) and merges are never undone, so the best
/// of several runs is kept.
pub const LOUVAIN_RESTARTS: usize = 32;

/// Louvain community detection. The first run visits nodes in ascending
/// id order, the restarts use orders from a fixed seeded stream, and the
/// partition with the highest modularity wins (earliest on ties). Nodes
/// without edges end up in singleton communities.
pub fn louvain(g: &ClientGraph) -> Result<Partition> {
    louvain_restarts(g, LOUVAIN_RESTARTS, &mut stream(&[tag::LOUVAIN]))
}

pub fn louvain_restarts<R: Rng + ?Sized>(g: &ClientGraph, restarts: usize, rng: &mut R) -> Result<Partition> {
    if g.nodes.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let (ids, dense) = index_graph(g);
    if dense.m == 0.0 {
        let singletons: Vec<usize> = (0..ids.len()).collect();
        return Ok(to_partition(&ids, &singletons));
    }
    let n = ids.len();
    let mut best = louvain_dense::<R>(&dense, (0..n).collect(), None);
    let mut best_q = dense.modularity(&best);
    for r in 0..restarts {
        // odd restarts start from a random coarse partition instead of singletons
        let start: Vec<usize> = if r % 2 == 1 && n > 2 {
            let k = rng.random_range(2..=(n / 2).max(2));
            (0..n).map(|_| rng.random_range(0..k)).collect()
        } else {
            (0..n).collect()
        };
        let candidate = louvain_dense(&dense, start, Some(&mut *rng));
        let q = dense.modularity(&candidate);
        if q > best_q + 1e-12 {
            best = candidate;
            best_q = q;
        }
    }
    Ok(to_partition(&ids, &best))
}

pub fn num_communities(part: &Partition) -> usize {
    part.values().collect::<BTreeSet<_>>().len()
}

/// Fraction of non-genesis approval edges that stay within one
/// ground-truth cluster. `clusters[client]` is the client's cluster.
pub fn approval_pureness(dag: &Dag, clusters: &[usize]) -> Result<f64> {
    let (mut pure, mut total) = (0usize, 0usize);
    for (a, b) in approval_edges(dag) {
        total += 1;
        if clusters[a] == clusters[b] {
            pure += 1;
        }
    }
    if total == 0 {
        return Err(Error::NoEdges);
    }
    Ok(pure as f64 / total as f64)
}

/// Fraction of clients whose community's relative-majority cluster differs
/// from their own. Within a community, all clients outside the single
/// largest cluster count as misclassified, which is the same count
/// whichever tied cluster is picked.
pub fn misclassification_fraction(part: &Partition, clusters: &[usize]) -> f64 {
    if part.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&client, &community) in part {
        *counts.entry(community).or_default().entry(clusters[client]).or_insert(0) += 1;
    }
    let misclassified: usize = counts
        .values()
        .map(|per_cluster| {
            let size: usize = per_cluster.values().sum();
            size - per_cluster.values().max().unwrap()
        })
        .sum();
    misclassified as f64 / part.len() as f64
}

/// Poisoned transactions among the two reference tips and everything they
/// approve directly or indirectly.
pub fn approved_poisoned_count(dag: &Dag, tips: (TransactionId, TransactionId)) -> Result<usize> {
    let mut set: HashSet<TransactionId> = dag.ancestors(tips.0)?;
    set.extend(dag.ancestors(tips.1)?);
    set.insert(tips.0);
    set.insert(tips.1);
    Ok(set.iter().filter(|&&t| dag.get(t).map(|x| x.poisoned).unwrap_or(false)).count())
}

/// Community -> (poisoned clients, benign clients).
pub fn poisoned_cluster_distribution(part: &Partition, poisoned: &BTreeSet<usize>) -> BTreeMap<usize, (usize, usize)> {
    let mut dist: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (client, &community) in part {
        let entry = dist.entry(community).or_insert((0, 0));
        if poisoned.contains(client) {
            entry.0 += 1;
        } else {
            entry.1 += 1;
        }
    }
    dist
}

/// Share of poisoned clients sitting in communities where poisoned clients
/// are a strict majority. `None` when there are no poisoned clients.
pub fn containment_fraction(dist: &BTreeMap<usize, (usize, usize)>) -> Option<f64> {
    let total: usize = dist.values().map(|d| d.0).sum();
    if total == 0 {
        return None;
    }
    let contained: usize = dist.values().filter(|(p, b)| p > b).map(|d| d.0).sum();
    Some(contained as f64 / total as f64)
}
