//! Planted hierarchical Gaussian worlds and exhaustive oracles.
//!
//! A world is a set of super modes, each a centre with several sub modes
//! around it. The server samples every sub mode; the target samples a chosen
//! subset (single sub modes or whole super modes) with a small mean shift and
//! covariance scaling. World configs are TOML:
//!
//! ```toml
//! d = 2
//! seed = 7
//!
//! [[super_modes]]
//! center = [0.0, 0.0]
//! dataset = "city"            # optional, defaults to "ds<index>"
//! sub_modes = [
//!   { offset = [1.0, 0.0], scale = 0.3, n = 100 },
//!   { offset = [-1.0, 0.0], scale = 0.3, n = 100 },
//! ]
//!
//! [[targets]]
//! super_mode = 0
//! sub_mode = 1                # omit to sample the whole super mode
//! shift = [0.05, 0.0]
//! scale_mult = 1.1
//! n = 80
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clustering::{FlatClustering, ModeTree};
use crate::dataset_io::FeatureMatrix;
use crate::error::{BmmError, Result};
use crate::matching::{assignment_cost, tie_tolerance, Assignment, CostMatrix, SelectionResult};

pub const ORACLE_MAX_ROWS: usize = 7;
pub const ORACLE_MAX_COLS: usize = 10;
pub const PARTITION_MAX_N: usize = 8;
pub const PARTITION_MAX_K: usize = 3;

/// Super-mode centres must be at least this many times the largest sub-mode
/// scale apart.
pub const SEPARATION_FACTOR: f64 = 8.0;
pub const MAX_SHIFT_RATIO: f64 = 0.5;
pub const SCALE_MULT_RANGE: (f64, f64) = (0.8, 1.25);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubMode {
    pub offset: Vec<f64>,
    pub scale: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperMode {
    pub center: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub sub_modes: Vec<SubMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMode {
    pub super_mode: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_mode: Option<usize>,
    pub shift: Vec<f64>,
    pub scale_mult: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedWorld {
    pub d: usize,
    pub seed: u64,
    pub super_modes: Vec<SuperMode>,
    pub targets: Vec<TargetMode>,
}

/// Planted origin of a group of rows: a whole super mode or one sub mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PlantedGroup {
    pub super_mode: usize,
    pub sub_mode: Option<usize>,
}

/// Ground truth produced alongside the generated features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    /// `(super, sub)` that generated each server row.
    pub server_rows: Vec<(usize, usize)>,
    /// Planted target mode that generated each target row.
    pub target_rows: Vec<usize>,
    /// Planted origin of each planted target mode.
    pub target_modes: Vec<PlantedGroup>,
}

impl Correspondence {
    /// Planted origin of each clustered target mode, by majority vote over
    /// its rows (ties go to the lower planted mode).
    pub fn cluster_truth(&self, target_clusters: &FlatClustering) -> Vec<PlantedGroup> {
        target_clusters
            .members()
            .iter()
            .map(|rows| {
                let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
                for &r in rows {
                    *votes.entry(self.target_rows[r]).or_insert(0) += 1;
                }
                let (mode, _) = votes
                    .iter()
                    .fold((0, 0), |acc, (&m, &c)| if c > acc.1 { (m, c) } else { acc });
                self.target_modes[mode]
            })
            .collect()
    }
}

impl PlantedWorld {
    pub fn from_toml(text: &str) -> Result<Self> {
        let w: PlantedWorld =
            toml::from_str(text).map_err(|e| BmmError::Format(format!("world config: {e}")))?;
        w.validate()?;
        Ok(w)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| BmmError::io(path, e))?;
        PlantedWorld::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("world serializes")
    }

    pub fn server_size(&self) -> usize {
        self.super_modes.iter().flat_map(|s| &s.sub_modes).map(|m| m.n).sum()
    }

    fn max_sub_scale(&self, super_mode: usize) -> f64 {
        self.super_modes[super_mode]
            .sub_modes
            .iter()
            .map(|m| m.scale)
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let param = |m: String| Err(BmmError::Parameter(m));
        let d = self.d;
        if d == 0 {
            return param("dimension must be positive".into());
        }
        if self.super_modes.is_empty() || self.targets.is_empty() {
            return param("world needs at least one super mode and one target mode".into());
        }
        let mut largest = 0.0f64;
        for (s, sup) in self.super_modes.iter().enumerate() {
            if sup.center.len() != d {
                return param(format!("super mode {s}: center has {} entries, d = {d}", sup.center.len()));
            }
            if sup.sub_modes.is_empty() {
                return param(format!("super mode {s} has no sub modes"));
            }
            for (t, sub) in sup.sub_modes.iter().enumerate() {
                if sub.offset.len() != d {
                    return param(format!("sub mode ({s},{t}): offset has wrong length"));
                }
                if !(sub.scale > 0.0 && sub.scale.is_finite()) {
                    return param(format!("sub mode ({s},{t}): scale {} must be positive", sub.scale));
                }
                if sub.n < 2 {
                    return param(format!("sub mode ({s},{t}): needs at least 2 samples"));
                }
                largest = largest.max(sub.scale);
            }
        }
        for a in 0..self.super_modes.len() {
            for b in a + 1..self.super_modes.len() {
                let gap = euclid(&self.super_modes[a].center, &self.super_modes[b].center);
                if gap < SEPARATION_FACTOR * largest {
                    return param(format!(
                        "super modes {a} and {b} are {gap:.3} apart, need at least {:.3}",
                        SEPARATION_FACTOR * largest
                    ));
                }
            }
        }
        for (m, t) in self.targets.iter().enumerate() {
            let Some(sup) = self.super_modes.get(t.super_mode) else {
                return param(format!("target {m}: unknown super mode {}", t.super_mode));
            };
            let scale = match t.sub_mode {
                Some(sub) => match sup.sub_modes.get(sub) {
                    Some(s) => s.scale,
                    None => return param(format!("target {m}: unknown sub mode {sub}")),
                },
                None => self.max_sub_scale(t.super_mode),
            };
            if t.shift.len() != d {
                return param(format!("target {m}: shift has wrong length"));
            }
            if norm(&t.shift) > MAX_SHIFT_RATIO * scale + 1e-12 {
                return param(format!("target {m}: shift exceeds {MAX_SHIFT_RATIO} x sub-mode scale"));
            }
            if !(SCALE_MULT_RANGE.0..=SCALE_MULT_RANGE.1).contains(&t.scale_mult) {
                return param(format!(
                    "target {m}: scale_mult {} outside [{}, {}]",
                    t.scale_mult, SCALE_MULT_RANGE.0, SCALE_MULT_RANGE.1
                ));
            }
            if t.n < 2 {
                return param(format!("target {m}: needs at least 2 samples"));
            }
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sample_into(out: &mut Vec<f32>, rng: &mut ChaCha8Rng, mean: &[f64], scale: f64) {
    for &m in mean {
        let z: f64 = rng.sample(StandardNormal);
        out.push((m + scale * z) as f32);
    }
}

/// Samples server and target features. Server ids are `srv-<super>-<sub>-<i>`,
/// target ids `tgt-<mode>-<i>`, so the two never collide.
pub fn generate(world: &PlantedWorld) -> Result<(FeatureMatrix, FeatureMatrix, Correspondence)> {
    world.validate()?;
    let d = world.d;
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed);

    let mut values = Vec::with_capacity(world.server_size() * d);
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut server_rows = Vec::new();
    for (s, sup) in world.super_modes.iter().enumerate() {
        let label = sup.dataset.clone().unwrap_or_else(|| format!("ds{s}"));
        for (t, sub) in sup.sub_modes.iter().enumerate() {
            let mean: Vec<f64> = sup.center.iter().zip(&sub.offset).map(|(c, o)| c + o).collect();
            for i in 0..sub.n {
                sample_into(&mut values, &mut rng, &mean, sub.scale);
                ids.push(format!("srv-{s}-{t}-{i}"));
                labels.push(label.clone());
                server_rows.push((s, t));
            }
        }
    }
    let server = FeatureMatrix::new(d, values, ids, labels)?;

    let mut values = Vec::new();
    let mut ids = Vec::new();
    let mut target_rows = Vec::new();
    let mut target_modes = Vec::new();
    for (m, tm) in world.targets.iter().enumerate() {
        let sup = &world.super_modes[tm.super_mode];
        let weights: Vec<usize> = sup.sub_modes.iter().map(|s| s.n).collect();
        let total: usize = weights.iter().sum();
        for i in 0..tm.n {
            let t = match tm.sub_mode {
                Some(t) => t,
                None => {
                    let mut pick = rng.random_range(0..total);
                    let mut t = 0;
                    while pick >= weights[t] {
                        pick -= weights[t];
                        t += 1;
                    }
                    t
                }
            };
            let sub = &sup.sub_modes[t];
            let mean: Vec<f64> = sup
                .center
                .iter()
                .zip(&sub.offset)
                .zip(&tm.shift)
                .map(|((c, o), s)| c + o + s)
                .collect();
            sample_into(&mut values, &mut rng, &mean, sub.scale * tm.scale_mult);
            ids.push(format!("tgt-{m}-{i}"));
            target_rows.push(m);
        }
        target_modes.push(PlantedGroup {
            super_mode: tm.super_mode,
            sub_mode: tm.sub_mode,
        });
    }
    let n_target = ids.len();
    let target = FeatureMatrix::new(d, values, ids, vec!["target".to_string(); n_target])?;
    Ok((
        server,
        target,
        Correspondence {
            server_rows,
            target_rows,
            target_modes,
        },
    ))
}

/// Exhaustive minimum over all injective maps; ties (within
/// [`tie_tolerance`]) resolve to the lexicographically smallest map.
pub fn oracle_assignment(cost: &CostMatrix) -> Result<Assignment> {
    let (l, h) = (cost.rows(), cost.cols());
    if l > ORACLE_MAX_ROWS || h > ORACLE_MAX_COLS {
        return Err(BmmError::Refused(format!(
            "{l}x{h} exceeds the {ORACLE_MAX_ROWS}x{ORACLE_MAX_COLS} enumeration limit"
        )));
    }
    if l > h {
        return Err(BmmError::Infeasible(format!("{l} rows into {h} columns")));
    }
    let mut all = Vec::new();
    let mut sigma = Vec::with_capacity(l);
    let mut used = vec![false; h];
    enumerate_injective(l, h, &mut sigma, &mut used, &mut |s| {
        all.push((s.to_vec(), assignment_cost(cost, s)));
    });
    let best = all.iter().map(|(_, c)| *c).fold(f64::INFINITY, f64::min);
    let tol = tie_tolerance(best);
    // enumeration order is lexicographic, so the first near-minimum wins
    let (sigma, total_cost) = all
        .into_iter()
        .find(|(_, c)| *c <= best + tol)
        .unwrap_or((Vec::new(), 0.0));
    Ok(Assignment { sigma, total_cost })
}

fn enumerate_injective(l: usize, h: usize, sigma: &mut Vec<usize>, used: &mut [bool], visit: &mut impl FnMut(&[usize])) {
    if sigma.len() == l {
        visit(sigma);
        return;
    }
    for j in 0..h {
        if used[j] {
            continue;
        }
        used[j] = true;
        sigma.push(j);
        enumerate_injective(l, h, sigma, used, visit);
        sigma.pop();
        used[j] = false;
    }
}

/// Exact minimum SSE over every partition into `k` clusters whose sizes are
/// all `floor(n/k)` or `ceil(n/k)`.
pub fn oracle_balanced_partition(features: &FeatureMatrix, k: usize) -> Result<f64> {
    let n = features.n();
    if n > PARTITION_MAX_N || k > PARTITION_MAX_K {
        return Err(BmmError::Refused(format!(
            "n = {n}, k = {k} exceeds the n <= {PARTITION_MAX_N}, k <= {PARTITION_MAX_K} enumeration limit"
        )));
    }
    if k == 0 || k > n {
        return Err(BmmError::Parameter(format!("cannot split {n} rows into {k} clusters")));
    }
    let d = features.d();
    let (lo, hi) = (n / k, n.div_ceil(k));
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    for code in 0..k.pow(n as u32) {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % k;
            c /= k;
        }
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        if sizes.iter().any(|&s| s < lo || s > hi) {
            continue;
        }
        let mut sse = 0.0;
        for cluster in 0..k {
            let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == cluster).collect();
            for j in 0..d {
                let mean = rows.iter().map(|&r| features.row(r)[j] as f64).sum::<f64>() / rows.len() as f64;
                sse += rows
                    .iter()
                    .map(|&r| (features.row(r)[j] as f64 - mean).powi(2))
                    .sum::<f64>();
            }
        }
        best = best.min(sse);
    }
    Ok(best)
}

/// Fraction of target modes whose matched node is more than half made of
/// rows from the planted super mode behind that target (which covers the
/// planted sub mode and every grouping above it). Unmatched targets count
/// as misses.
pub fn matching_precision(
    result: &SelectionResult,
    truth: &[PlantedGroup],
    server_rows: &[(usize, usize)],
    tree: &ModeTree,
) -> f64 {
    if result.per_target.is_empty() {
        return 0.0;
    }
    let correct = result
        .per_target
        .iter()
        .zip(truth)
        .filter(|(m, g)| {
            let Some(m) = m else { return false };
            let members = &tree.node(m.node_id).members;
            let hits = members.iter().filter(|&&r| server_rows[r].0 == g.super_mode).count();
            2 * hits > members.len()
        })
        .count();
    correct as f64 / result.per_target.len() as f64
}

/// Random well-separated world: `supers` super modes on scaled axis
/// directions, `subs` sub modes each, targets drawn from `target_groups`.
pub fn random_world(
    d: usize,
    supers: usize,
    subs: usize,
    per_sub: usize,
    target_groups: &[PlantedGroup],
    per_target: usize,
    seed: u64,
) -> PlantedWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0f3_011d);
    let scale = 1.0;
    let spread = 2.5;
    let sep = SEPARATION_FACTOR * scale * 3.0;
    let super_modes = (0..supers)
        .map(|s| {
            let mut center = vec![0.0; d];
            center[s % d] = sep * (1 + s / d) as f64;
            SuperMode {
                center,
                dataset: None,
                sub_modes: (0..subs)
                    .map(|_| SubMode {
                        offset: (0..d).map(|_| rng.random_range(-spread..spread)).collect(),
                        scale: scale * rng.random_range(0.6..1.0),
                        n: per_sub,
                    })
                    .collect(),
            }
        })
        .collect::<Vec<_>>();
    let targets = target_groups
        .iter()
        .map(|g| {
            let base = match g.sub_mode {
                Some(t) => super_modes[g.super_mode].sub_modes[t].scale,
                None => super_modes[g.super_mode]
                    .sub_modes
                    .iter()
                    .map(|m| m.scale)
                    .fold(f64::INFINITY, f64::min),
            };
            let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let len = norm(&dir).max(1e-12);
            let magnitude = rng.random_range(0.0..MAX_SHIFT_RATIO * base * 0.9);
            TargetMode {
                super_mode: g.super_mode,
                sub_mode: g.sub_mode,
                shift: dir.iter().map(|x| x / len * magnitude).collect(),
                scale_mult: rng.random_range(SCALE_MULT_RANGE.0..SCALE_MULT_RANGE.1),
                n: per_target,
            }
        })
        .collect();
    PlantedWorld {
        d,
        seed,
        super_modes,
        targets,
    }
}
