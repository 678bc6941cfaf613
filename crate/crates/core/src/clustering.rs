//! Flat k-means (plain and size-balanced) and agglomerative merging of the
//! balanced leaves into a binary mode tree.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_io::FeatureMatrix;
use crate::domain_gap::{gaussian_stats, ModeStats};
use crate::error::{BmmError, Result};

pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_N_INIT: usize = 4;

/// Result of a flat clustering run.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatClustering {
    pub k: usize,
    pub d: usize,
    pub assignment: Vec<usize>,
    /// Row-major `k x d`.
    pub centroids: Vec<f64>,
    pub sse: f64,
    /// SSE after every centroid update of the winning restart.
    pub sse_history: Vec<f64>,
    pub balanced: bool,
}

impl FlatClustering {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.d..(c + 1) * self.d]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    /// Row indices of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &a) in self.assignment.iter().enumerate() {
            out[a].push(i);
        }
        out
    }
}

/// Sum of squared distances from each row to the centroid it is assigned to.
pub fn sse_of(features: &FeatureMatrix, assignment: &[usize], centroids: &[f64]) -> f64 {
    let d = features.d();
    assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(features.row(i), &centroids[c * d..(c + 1) * d]))
        .sum()
}

#[inline]
fn sq_dist(x: &[f32], c: &[f64]) -> f64 {
    x.iter()
        .zip(c)
        .map(|(&a, &b)| {
            let t = a as f64 - b;
            t * t
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest SSE wins.
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            n_init: DEFAULT_N_INIT,
        }
    }
}

pub fn fit_kmeans(features: &FeatureMatrix, k: usize, seed: u64) -> Result<FlatClustering> {
    KMeansConfig::default().fit(features, k, seed, false)
}

pub fn fit_balanced_kmeans(features: &FeatureMatrix, k: usize, seed: u64) -> Result<FlatClustering> {
    KMeansConfig::default().fit(features, k, seed, true)
}

impl KMeansConfig {
    pub fn fit(&self, features: &FeatureMatrix, k: usize, seed: u64, balanced: bool) -> Result<FlatClustering> {
        let n = features.n();
        if k == 0 {
            return Err(BmmError::Parameter("cluster count must be positive".into()));
        }
        if k > n {
            return Err(BmmError::Parameter(format!("cluster count {k} exceeds {n} samples")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best: Option<FlatClustering> = None;
        for _ in 0..self.n_init.max(1) {
            let init = kmeans_plus_plus(features, k, &mut rng);
            let run = if balanced {
                self.lloyd_balanced(features, k, init)
            } else {
                self.lloyd(features, k, init)
            };
            if best.as_ref().is_none_or(|b| run.sse < b.sse) {
                best = Some(run);
            }
        }
        let mut best = best.expect("at least one restart");
        if balanced {
            let mut assignment = std::mem::take(&mut best.assignment);
            swap_polish(features, k, &mut assignment);
            let history = std::mem::take(&mut best.sse_history);
            best = finish(features, k, assignment, history, true);
        }
        Ok(best)
    }

    fn lloyd(&self, f: &FeatureMatrix, k: usize, mut centroids: Vec<f64>) -> FlatClustering {
        let mut assignment = nearest_assignment(f, &centroids, k, None);
        let mut history = Vec::new();
        for _ in 0..self.max_iter {
            fill_empty_clusters(f, k, &mut assignment, &centroids);
            let updated = cluster_means(f, &assignment, k);
            let moved = max_shift(&centroids, &updated, f.d());
            centroids = updated;
            history.push(sse_of(f, &assignment, &centroids));
            let next = nearest_assignment(f, &centroids, k, Some(&assignment));
            if next == assignment || moved < self.tol {
                break;
            }
            assignment = next;
        }
        fill_empty_clusters(f, k, &mut assignment, &centroids);
        finish(f, k, assignment, history, false)
    }

    fn lloyd_balanced(&self, f: &FeatureMatrix, k: usize, mut centroids: Vec<f64>) -> FlatClustering {
        let mut dist = distance_table(f, &centroids, k);
        let mut assignment = balanced_assignment(&dist, f.n(), k);
        exchange_refine(&dist, k, &mut assignment);
        let mut history = Vec::new();
        for _ in 0..self.max_iter {
            let updated = cluster_means(f, &assignment, k);
            let moved = max_shift(&centroids, &updated, f.d());
            centroids = updated;
            history.push(sse_of(f, &assignment, &centroids));
            if moved < self.tol {
                break;
            }
            dist = distance_table(f, &centroids, k);
            let mut next = balanced_assignment(&dist, f.n(), k);
            exchange_refine(&dist, k, &mut next);
            let current_cost = table_cost(&dist, &assignment, k);
            let next_cost = table_cost(&dist, &next, k);
            // Only accept strict improvements so the objective never rises.
            if next == assignment || next_cost >= current_cost - 1e-12 * current_cost.abs() {
                break;
            }
            assignment = next;
        }
        finish(f, k, assignment, history, true)
    }
}

fn finish(f: &FeatureMatrix, k: usize, assignment: Vec<usize>, mut history: Vec<f64>, balanced: bool) -> FlatClustering {
    let centroids = cluster_means(f, &assignment, k);
    let sse = sse_of(f, &assignment, &centroids);
    if history.last() != Some(&sse) {
        history.push(sse);
    }
    FlatClustering {
        k,
        d: f.d(),
        assignment,
        centroids,
        sse,
        sse_history: history,
        balanced,
    }
}

fn kmeans_plus_plus(f: &FeatureMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (n, d) = (f.n(), f.d());
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| sq_dist(f.row(i), &to_f64(f.row(chosen[0]))))
        .collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            while nearest[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            // Every row coincides with a chosen centre; fall back to unused indices.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(pick);
        let c = to_f64(f.row(pick));
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(sq_dist(f.row(i), &c));
        }
    }
    let mut centroids = Vec::with_capacity(k * d);
    for &i in &chosen {
        centroids.extend(f.row(i).iter().map(|&v| v as f64));
    }
    centroids
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// `n x k` squared distances, rows computed in parallel.
fn distance_table(f: &FeatureMatrix, centroids: &[f64], k: usize) -> Vec<f64> {
    let d = f.d();
    (0..f.n())
        .into_par_iter()
        .flat_map_iter(|i| (0..k).map(move |c| sq_dist(f.row(i), &centroids[c * d..(c + 1) * d])))
        .collect()
}

fn table_cost(dist: &[f64], assignment: &[usize], k: usize) -> f64 {
    assignment.iter().enumerate().map(|(i, &c)| dist[i * k + c]).sum()
}

/// Nearest centroid; ties keep the current cluster, then the lowest index.
fn nearest_assignment(f: &FeatureMatrix, centroids: &[f64], k: usize, current: Option<&[usize]>) -> Vec<usize> {
    let dist = distance_table(f, centroids, k);
    (0..f.n())
        .map(|i| {
            let row = &dist[i * k..(i + 1) * k];
            let mut best = current.map_or(0, |cur| cur[i]);
            for (c, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Greedy capacitated assignment: walk (row, cluster) pairs by increasing
/// distance and place each row in the first cluster with room. Exactly
/// `n mod k` clusters may reach `ceil(n/k)`, the rest stop at `floor(n/k)`.
/// The walk first covers each row's nearest few clusters; rows still
/// unplaced after that get a second walk over all their pairs.
fn balanced_assignment(dist: &[f64], n: usize, k: usize) -> Vec<usize> {
    const SHORTLIST: usize = 8;
    let floor = n / k;
    let mut ceil_slots = n % k;
    let mut assignment = vec![usize::MAX; n];
    let mut sizes = vec![0usize; k];
    let m = k.min(SHORTLIST);
    let shortlist = |i: usize| {
        let mut cs: Vec<usize> = (0..k).collect();
        let by_dist = |&a: &usize, &b: &usize| dist[i * k + a].total_cmp(&dist[i * k + b]).then(a.cmp(&b));
        if m < k {
            cs.select_nth_unstable_by(m - 1, by_dist);
            cs.truncate(m);
        }
        cs.into_iter().map(move |c| (i, c))
    };
    let first: Vec<(usize, usize)> = (0..n).into_par_iter().flat_map_iter(shortlist).collect();
    greedy_walk(dist, k, first, floor, &mut ceil_slots, &mut sizes, &mut assignment);
    let rest: Vec<(usize, usize)> = (0..n)
        .filter(|&i| assignment[i] == usize::MAX)
        .flat_map(|i| (0..k).map(move |c| (i, c)))
        .collect();
    greedy_walk(dist, k, rest, floor, &mut ceil_slots, &mut sizes, &mut assignment);
    assignment
}

fn greedy_walk(
    dist: &[f64],
    k: usize,
    mut pairs: Vec<(usize, usize)>,
    floor: usize,
    ceil_slots: &mut usize,
    sizes: &mut [usize],
    assignment: &mut [usize],
) {
    pairs.par_sort_unstable_by(|&(i, a), &(j, b)| {
        dist[i * k + a]
            .total_cmp(&dist[j * k + b])
            .then(i.cmp(&j))
            .then(a.cmp(&b))
    });
    for (i, c) in pairs {
        if assignment[i] != usize::MAX {
            continue;
        }
        let room = sizes[c] < floor || (sizes[c] == floor && *ceil_slots > 0);
        if !room {
            continue;
        }
        if sizes[c] == floor {
            *ceil_slots -= 1;
        }
        sizes[c] += 1;
        assignment[i] = c;
    }
}

/// Size-preserving improvement with centroids held fixed: for every pair of
/// clusters, swap the rows that most want to trade places while the swap
/// lowers the summed distance.
fn exchange_refine(dist: &[f64], k: usize, assignment: &mut [usize]) {
    const MAX_PASSES: usize = 50;
    for _ in 0..MAX_PASSES {
        let mut members = vec![Vec::new(); k];
        for (i, &c) in assignment.iter().enumerate() {
            members[c].push(i);
        }
        let mut improved = false;
        for a in 0..k {
            for b in a + 1..k {
                let gain = |i: usize, from: usize, to: usize| dist[i * k + from] - dist[i * k + to];
                let best_a = members[a].iter().map(|&i| gain(i, a, b)).fold(f64::NEG_INFINITY, f64::max);
                let best_b = members[b].iter().map(|&i| gain(i, b, a)).fold(f64::NEG_INFINITY, f64::max);
                if best_a + best_b <= 0.0 {
                    continue;
                }
                let mut from_a: Vec<(f64, usize)> = members[a].iter().map(|&i| (gain(i, a, b), i)).collect();
                let mut from_b: Vec<(f64, usize)> = members[b].iter().map(|&i| (gain(i, b, a), i)).collect();
                let by_gain = |x: &(f64, usize), y: &(f64, usize)| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1));
                from_a.sort_unstable_by(by_gain);
                from_b.sort_unstable_by(by_gain);
                let mut swapped = false;
                for (&(ga, i), &(gb, j)) in from_a.iter().zip(&from_b) {
                    if ga + gb <= 1e-12 * (dist[i * k + a] + dist[j * k + b]).max(f64::MIN_POSITIVE) {
                        break;
                    }
                    assignment[i] = b;
                    assignment[j] = a;
                    swapped = true;
                }
                if swapped {
                    improved = true;
                    members[a].clear();
                    members[b].clear();
                    for (i, &c) in assignment.iter().enumerate() {
                        if c == a {
                            members[a].push(i);
                        } else if c == b {
                            members[b].push(i);
                        }
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
}

/// Exact local search on the true objective with cluster sizes held in
/// range: single moves out of a `ceil` cluster into a `floor` one, and
/// pairwise swaps. Each row only looks at its few nearest other clusters.
fn swap_polish(f: &FeatureMatrix, k: usize, assignment: &mut [usize]) {
    const NEIGHBOURS: usize = 4;
    const MAX_PASSES: usize = 100;
    if k < 2 {
        return;
    }
    let (n, d) = (f.n(), f.d());
    let floor = n / k;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| to_f64(f.row(i))).collect();
    let mut means = cluster_means(f, assignment, k);
    let mut members = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        members[c].push(i);
    }
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let tol = |scale: f64| 1e-12 * scale.max(f64::MIN_POSITIVE);

    for _ in 0..MAX_PASSES {
        let mut improved = false;
        for i in 0..n {
            let a = assignment[i];
            let na = members[a].len() as f64;
            let ma = means[a * d..(a + 1) * d].to_vec();
            let dia = sq(&rows[i], &ma);
            let mut others: Vec<(f64, usize)> = (0..k)
                .filter(|&c| c != a)
                .map(|c| (sq(&rows[i], &means[c * d..(c + 1) * d]), c))
                .collect();
            others.sort_unstable_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            others.truncate(NEIGHBOURS);

            let mut best: Option<(f64, usize, Option<usize>)> = None;
            for &(dib, b) in &others {
                let nb = members[b].len() as f64;
                if members[a].len() == floor + 1 && members[b].len() == floor && na > 1.0 {
                    let delta = nb / (nb + 1.0) * dib - na / (na - 1.0) * dia;
                    if delta < -tol(dia + dib) && best.is_none_or(|bst| delta < bst.0) {
                        best = Some((delta, b, None));
                    }
                }
                let mb = &means[b * d..(b + 1) * d];
                for &j in &members[b] {
                    let dij = sq(&rows[i], &rows[j]);
                    let dja = sq(&rows[j], &ma);
                    let djb = sq(&rows[j], mb);
                    let delta = (dja - dia - dij / na) + (dib - djb - dij / nb);
                    if delta < -tol(dia + djb) && best.is_none_or(|bst| delta < bst.0) {
                        best = Some((delta, b, Some(j)));
                    }
                }
            }
            let Some((_, b, partner)) = best else { continue };
            improved = true;
            members[a].retain(|&r| r != i);
            members[b].push(i);
            assignment[i] = b;
            if let Some(j) = partner {
                members[b].retain(|&r| r != j);
                members[a].push(j);
                assignment[j] = a;
            }
            for c in [a, b] {
                let m = &mut means[c * d..(c + 1) * d];
                m.iter_mut().for_each(|v| *v = 0.0);
                for &r in &members[c] {
                    m.iter_mut().zip(&rows[r]).for_each(|(v, x)| *v += x);
                }
                let cnt = members[c].len() as f64;
                m.iter_mut().for_each(|v| *v /= cnt);
            }
        }
        if !improved {
            break;
        }
    }
}

fn cluster_means(f: &FeatureMatrix, assignment: &[usize], k: usize) -> Vec<f64> {
    let d = f.d();
    let mut sums = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for (i, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(f.row(i)) {
            *s += v as f64;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for s in &mut sums[c * d..(c + 1) * d] {
                *s /= counts[c] as f64;
            }
        }
    }
    sums
}

fn max_shift(old: &[f64], new: &[f64], d: usize) -> f64 {
    old.chunks(d)
        .zip(new.chunks(d))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Gives every empty cluster the row farthest from its own centroid, taken
/// from a cluster that can spare one.
fn fill_empty_clusters(f: &FeatureMatrix, k: usize, assignment: &mut [usize], centroids: &[f64]) {
    let d = f.d();
    let mut sizes = vec![0usize; k];
    for &a in assignment.iter() {
        sizes[a] += 1;
    }
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let donor = (0..f.n())
            .filter(|&i| sizes[assignment[i]] > 1)
            .map(|i| (i, sq_dist(f.row(i), &centroids[assignment[i] * d..(assignment[i] + 1) * d])))
            .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((i, v)),
            });
        if let Some((i, _)) = donor {
            sizes[assignment[i]] -= 1;
            assignment[i] = c;
            sizes[c] += 1;
        }
    }
}

/// Inter-cluster distance used when merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    /// Euclidean distance between member means.
    #[default]
    Centroid,
    /// `sqrt(2 na nb / (na + nb)) * |ca - cb|`; merge heights never decrease.
    Ward,
}

impl FromStr for Linkage {
    type Err = BmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "centroid" => Ok(Linkage::Centroid),
            "ward" => Ok(Linkage::Ward),
            other => Err(BmmError::Parameter(format!("unknown linkage {other:?}"))),
        }
    }
}

impl fmt::Display for Linkage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Linkage::Centroid => "centroid",
            Linkage::Ward => "ward",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub children: Option<[usize; 2]>,
    /// Linkage distance at which this node was formed; 0 for leaves.
    pub height: f64,
    /// Sorted row indices into the server feature matrix.
    pub members: Vec<usize>,
    pub stats: ModeStats,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// Binary merge tree over the server. Leaves are nodes `0..J`, merges are
/// numbered `J..2J-1` in the order they happened, the root is last.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeTree {
    nodes: Vec<TreeNode>,
    leaf_count: usize,
    dim: usize,
    linkage: Linkage,
    sample_ids: Vec<String>,
    dataset_labels: Vec<String>,
}

impl ModeTree {
    /// Assembles a tree and checks every structural invariant.
    pub fn from_parts(
        nodes: Vec<TreeNode>,
        leaf_count: usize,
        dim: usize,
        linkage: Linkage,
        sample_ids: Vec<String>,
        dataset_labels: Vec<String>,
    ) -> Result<Self> {
        let tree = ModeTree {
            nodes,
            leaf_count,
            dim,
            linkage,
            sample_ids,
            dataset_labels,
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(BmmError::Validation(msg));
        let (j, h) = (self.leaf_count, self.nodes.len());
        if j == 0 || h != 2 * j - 1 {
            return bad(format!("{h} nodes for {j} leaves, expected 2J-1"));
        }
        let n = self.sample_ids.len();
        if self.dataset_labels.len() != n {
            return bad("row catalog lengths differ".into());
        }
        let mut roots = 0;
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.id != idx {
                return bad(format!("node at position {idx} has id {}", node.id));
            }
            if node.stats.dim() != self.dim || node.stats.count() != node.members.len() {
                return bad(format!("node {idx} stats disagree with its members"));
            }
            if !node.members.windows(2).all(|w| w[0] < w[1]) || node.members.last().is_some_and(|&m| m >= n) {
                return bad(format!("node {idx} members are not sorted unique row indices"));
            }
            if (idx < j) != node.is_leaf() {
                return bad(format!("node {idx}: leaves must be exactly nodes 0..{j}"));
            }
            match node.parent {
                None => roots += 1,
                Some(p) => {
                    let ok = self.nodes.get(p).and_then(|pn| pn.children).is_some_and(|c| c.contains(&idx));
                    if !ok {
                        return bad(format!("node {idx} names parent {p}, which does not list it"));
                    }
                }
            }
            if let Some([a, b]) = node.children {
                if a == b || a >= h || b >= h {
                    return bad(format!("node {idx} has invalid children"));
                }
                for c in [a, b] {
                    if self.nodes[c].parent != Some(idx) {
                        return bad(format!("child {c} of node {idx} does not point back"));
                    }
                }
                let merged = merge_sorted(&self.nodes[a].members, &self.nodes[b].members);
                if merged.len() != self.nodes[a].members.len() + self.nodes[b].members.len() || merged != node.members {
                    return bad(format!("node {idx} is not the disjoint union of its children"));
                }
            }
        }
        if roots != 1 {
            return bad(format!("{roots} roots"));
        }
        if self.root().members.len() != n {
            return bad("root does not cover every server row".into());
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn root(&self) -> &TreeNode {
        self.nodes.last().expect("tree is never empty")
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn linkage(&self) -> Linkage {
        self.linkage
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn dataset_labels(&self) -> &[String] {
        &self.dataset_labels
    }

    /// Edges between `id` and the root.
    pub fn depth(&self, id: usize) -> usize {
        let mut depth = 0;
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            depth += 1;
            cur = p;
        }
        depth
    }

    pub fn is_ancestor(&self, ancestor: usize, mut node: usize) -> bool {
        while let Some(p) = self.nodes[node].parent {
            if p == ancestor {
                return true;
            }
            node = p;
        }
        false
    }

    /// Number of nodes at each depth, root first.
    pub fn level_sizes(&self) -> Vec<usize> {
        let mut levels = Vec::new();
        for id in 0..self.nodes.len() {
            let dep = self.depth(id);
            if levels.len() <= dep {
                levels.resize(dep + 1, 0);
            }
            levels[dep] += 1;
        }
        levels
    }
}

fn merge_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

struct Active {
    sum: Vec<f64>,
    size: usize,
}

impl Active {
    fn centroid_dist(&self, other: &Active) -> f64 {
        let (na, nb) = (self.size as f64, other.size as f64);
        self.sum
            .iter()
            .zip(&other.sum)
            .map(|(a, b)| {
                let t = a / na - b / nb;
                t * t
            })
            .sum::<f64>()
            .sqrt()
    }

    fn linkage_dist(&self, other: &Active, linkage: Linkage) -> f64 {
        let base = self.centroid_dist(other);
        match linkage {
            Linkage::Centroid => base,
            Linkage::Ward => {
                let (na, nb) = (self.size as f64, other.size as f64);
                (2.0 * na * nb / (na + nb)).sqrt() * base
            }
        }
    }
}

/// Merges the closest pair of clusters until one remains. Ties go to the
/// lexicographically smallest `(node_id, node_id)` pair.
pub fn build_hierarchy(leaves: &FlatClustering, features: &FeatureMatrix, linkage: Linkage) -> Result<ModeTree> {
    let j = leaves.k;
    if leaves.assignment.len() != features.n() {
        return Err(BmmError::Validation(format!(
            "clustering covers {} rows, features have {}",
            leaves.assignment.len(),
            features.n()
        )));
    }
    if j == 0 {
        return Err(BmmError::Validation("clustering has no clusters".into()));
    }
    let d = features.d();
    let leaf_members = leaves.members();
    if let Some(c) = leaf_members.iter().position(Vec::is_empty) {
        return Err(BmmError::Validation(format!("leaf cluster {c} is empty")));
    }

    let h = 2 * j - 1;
    let mut members: Vec<Vec<usize>> = leaf_members;
    let mut parent: Vec<Option<usize>> = vec![None; h];
    let mut children: Vec<Option<[usize; 2]>> = vec![None; h];
    let mut heights = vec![0.0f64; h];
    let mut active: Vec<Option<Active>> = members
        .iter()
        .map(|m| {
            let mut sum = vec![0.0; d];
            for &r in m {
                for (s, &v) in sum.iter_mut().zip(features.row(r)) {
                    *s += v as f64;
                }
            }
            Some(Active { sum, size: m.len() })
        })
        .collect();
    active.resize_with(h, || None);

    // Pairwise linkage distances among live clusters, upper triangle.
    let mut dist = vec![f64::INFINITY; h * h];
    for a in 0..j {
        for b in a + 1..j {
            let (x, y) = (active[a].as_ref().unwrap(), active[b].as_ref().unwrap());
            dist[a * h + b] = x.linkage_dist(y, linkage);
        }
    }
    let mut live: Vec<usize> = (0..j).collect();

    for new_id in j..h {
        let mut best: Option<(f64, usize, usize)> = None;
        for (ia, &a) in live.iter().enumerate() {
            for &b in &live[ia + 1..] {
                let v = dist[a * h + b];
                if best.is_none_or(|(bv, _, _)| v < bv) {
                    best = Some((v, a, b));
                }
            }
        }
        let (height, a, b) = best.expect("at least two live clusters");
        let (x, y) = (active[a].take().unwrap(), active[b].take().unwrap());
        let merged = Active {
            sum: x.sum.iter().zip(&y.sum).map(|(p, q)| p + q).collect(),
            size: x.size + y.size,
        };
        members.push(merge_sorted(&members[a], &members[b]));
        parent[a] = Some(new_id);
        parent[b] = Some(new_id);
        children[new_id] = Some([a, b]);
        heights[new_id] = height;
        live.retain(|&c| c != a && c != b);
        for &c in &live {
            dist[c * h + new_id] = active[c].as_ref().unwrap().linkage_dist(&merged, linkage);
        }
        active[new_id] = Some(merged);
        live.push(new_id);
    }

    let stats: Vec<ModeStats> = members
        .par_iter()
        .map(|m| gaussian_stats(features, m))
        .collect::<Result<_>>()
        .map_err(|e| match e {
            BmmError::InsufficientSamples(msg) => BmmError::InsufficientSamples(format!(
                "a tree node has fewer than 2 rows ({msg}); use fewer leaves"
            )),
            other => other,
        })?;

    let nodes = members
        .into_iter()
        .zip(stats)
        .enumerate()
        .map(|(id, (members, stats))| TreeNode {
            id,
            parent: parent[id],
            children: children[id],
            height: heights[id],
            members,
            stats,
        })
        .collect();
    ModeTree::from_parts(
        nodes,
        j,
        d,
        linkage,
        features.sample_ids().to_vec(),
        features.dataset_labels().to_vec(),
    )
}
