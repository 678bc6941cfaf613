//! End-to-end orchestration shared by the `bmm` binary and the C API:
//! offline tree build, per-target matching, evaluation, pruning and the
//! benchmark sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::clustering::{build_hierarchy, fit_balanced_kmeans, fit_kmeans, FlatClustering, Linkage, ModeTree};
use crate::dataset_io::{FeatureMatrix, Manifest};
use crate::domain_gap::{cost_matrix_between, fid_with_eps, gaussian_stats, ModeStats, DEFAULT_EPS_COV};
use crate::error::{BmmError, Result};
use crate::matching::{
    direct_match, select_direct, select_training_set, solve_assignment, Assignment, AssignmentProblem,
    SelectionResult,
};
use crate::pruning::{prune, prune_rows, Budget, Strategy};
use crate::synth::{generate, matching_precision, PlantedWorld};

pub const DEFAULT_LEAVES: usize = 128;
pub const DEFAULT_TARGET_CLUSTERS: usize = 20;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub leaves: usize,
    pub target_clusters: usize,
    pub seed: u64,
    pub linkage: Linkage,
    pub eps_cov: f64,
    pub budget: Option<Budget>,
    pub strategy: Strategy,
    /// Matches above this FID are flagged in the report; never changes the result.
    pub warn_fid: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            leaves: DEFAULT_LEAVES,
            target_clusters: DEFAULT_TARGET_CLUSTERS,
            seed: 0,
            linkage: Linkage::Centroid,
            eps_cov: DEFAULT_EPS_COV,
            budget: None,
            strategy: Strategy::Uniform,
            warn_fid: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_clusters == 0 || self.leaves < self.target_clusters {
            return Err(BmmError::Parameter(format!(
                "need J >= L >= 1, got J = {}, L = {}",
                self.leaves, self.target_clusters
            )));
        }
        if !(self.eps_cov > 0.0 && self.eps_cov.is_finite()) {
            return Err(BmmError::Parameter(format!("eps_cov must be positive, got {}", self.eps_cov)));
        }
        Ok(())
    }

    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("tool".into(), format!("bmm {}", env!("CARGO_PKG_VERSION")));
        m.insert("seed".into(), self.seed.to_string());
        m.insert("leaves".into(), self.leaves.to_string());
        m.insert("target_clusters".into(), self.target_clusters.to_string());
        m.insert("linkage".into(), self.linkage.to_string());
        m.insert("eps_cov".into(), self.eps_cov.to_string());
        m
    }
}

/// Balanced leaves plus agglomerative merge; the one-time offline step.
pub fn build_server(server: &FeatureMatrix, leaves: usize, seed: u64, linkage: Linkage) -> Result<ModeTree> {
    if leaves > server.n() {
        return Err(BmmError::Parameter(format!(
            "{leaves} leaves requested for {} server rows",
            server.n()
        )));
    }
    let flat = fit_balanced_kmeans(server, leaves, seed)?;
    build_hierarchy(&flat, server, linkage)
}

/// Flat clustering of the target and the Gaussian stats of each mode.
pub fn target_modes(target: &FeatureMatrix, clusters: usize, seed: u64) -> Result<(FlatClustering, Vec<ModeStats>)> {
    let flat = fit_kmeans(target, clusters, seed)?;
    let stats = flat
        .members()
        .iter()
        .enumerate()
        .map(|(y, rows)| {
            gaussian_stats(target, rows).map_err(|e| match e {
                BmmError::InsufficientSamples(_) => BmmError::InsufficientSamples(format!(
                    "target mode {y} has {} sample(s); choose a smaller number of target clusters",
                    rows.len()
                )),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((flat, stats))
}

/// Which tree nodes may be matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Candidates {
    AllNodes,
    LeavesOnly,
}

impl Candidates {
    pub fn node_ids(self, tree: &ModeTree) -> Vec<usize> {
        match self {
            Candidates::AllNodes => (0..tree.node_count()).collect(),
            Candidates::LeavesOnly => (0..tree.leaf_count()).collect(),
        }
    }
}

pub fn build_problem(tree: &ModeTree, targets: &[ModeStats], candidates: Candidates, eps: f64) -> Result<AssignmentProblem> {
    let node_ids = candidates.node_ids(tree);
    let stats: Vec<&ModeStats> = node_ids.iter().map(|&id| &tree.node(id).stats).collect();
    let cost = cost_matrix_between(targets, &stats, eps)?;
    AssignmentProblem::with_node_ids(cost, node_ids)
}

#[derive(Debug, Clone)]
pub struct MatchOutcome {
    pub target_clusters: FlatClustering,
    pub target_stats: Vec<ModeStats>,
    pub problem: AssignmentProblem,
    pub assignment: Assignment,
    pub selection: SelectionResult,
    /// Present when a budget was configured.
    pub pruned: Option<SelectionResult>,
}

pub fn run_match(tree: &ModeTree, target: &FeatureMatrix, cfg: &PipelineConfig) -> Result<MatchOutcome> {
    if cfg.target_clusters == 0 || cfg.target_clusters > tree.node_count() {
        return Err(BmmError::Parameter(format!(
            "L = {} target modes cannot be matched into {} tree nodes",
            cfg.target_clusters,
            tree.node_count()
        )));
    }
    if cfg.eps_cov.is_nan() || cfg.eps_cov <= 0.0 {
        return Err(BmmError::Parameter("eps_cov must be positive".into()));
    }
    if target.d() != tree.dim() {
        return Err(BmmError::Parameter(format!(
            "target dimension {} does not match server dimension {}",
            target.d(),
            tree.dim()
        )));
    }
    let (target_clusters, target_stats) = target_modes(target, cfg.target_clusters, cfg.seed)?;
    let problem = build_problem(tree, &target_stats, Candidates::AllNodes, cfg.eps_cov)?;
    let assignment = solve_assignment(&problem)?;
    let selection = select_training_set(tree, &assignment, &problem)?;
    let pruned = cfg
        .budget
        .map(|b| prune(&selection, tree, b, cfg.strategy, cfg.seed))
        .transpose()?;
    Ok(MatchOutcome {
        target_clusters,
        target_stats,
        problem,
        assignment,
        selection,
        pruned,
    })
}

pub fn selection_manifest(tree: &ModeTree, rows: &[usize], metadata: BTreeMap<String, String>) -> Manifest {
    Manifest {
        entries: rows
            .iter()
            .map(|&r| (tree.sample_ids()[r].clone(), tree.dataset_labels()[r].clone()))
            .collect(),
        metadata,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetReport {
    pub target_mode: usize,
    pub target_size: usize,
    pub node_id: usize,
    pub fid: f64,
    pub node_size: usize,
    pub node_depth: usize,
    pub leaf: bool,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatchReport {
    pub leaf_count: usize,
    pub node_count: usize,
    pub target_clusters: usize,
    pub total_cost: f64,
    pub per_target: Vec<TargetReport>,
    pub selected_nodes: Vec<usize>,
    pub selected_samples: usize,
    pub composition: BTreeMap<String, usize>,
    pub pruned_samples: Option<usize>,
}

impl MatchReport {
    pub fn new(tree: &ModeTree, outcome: &MatchOutcome, warn_fid: Option<f64>) -> Self {
        let sizes = outcome.target_clusters.sizes();
        let per_target = outcome
            .selection
            .per_target
            .iter()
            .enumerate()
            .filter_map(|(y, m)| m.map(|m| (y, m)))
            .map(|(y, m)| TargetReport {
                target_mode: y,
                target_size: sizes[y],
                node_id: m.node_id,
                fid: m.fid,
                node_size: tree.node(m.node_id).members.len(),
                node_depth: tree.depth(m.node_id),
                leaf: tree.node(m.node_id).is_leaf(),
                flagged: warn_fid.is_some_and(|w| m.fid > w),
            })
            .collect();
        let final_sel = outcome.pruned.as_ref().unwrap_or(&outcome.selection);
        MatchReport {
            leaf_count: tree.leaf_count(),
            node_count: tree.node_count(),
            target_clusters: sizes.len(),
            total_cost: outcome.assignment.total_cost,
            per_target,
            selected_nodes: outcome.selection.selected_nodes.clone(),
            selected_samples: outcome.selection.sample_rows.len(),
            composition: final_sel.composition.clone(),
            pruned_samples: outcome.pruned.as_ref().map(|p| p.sample_rows.len()),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "server tree: J = {}, H = {}", self.leaf_count, self.node_count);
        let _ = writeln!(s, "target modes: L = {}", self.target_clusters);
        let _ = writeln!(s, "{:>6} {:>6} {:>6} {:>12} {:>8} {:>6}", "target", "size", "node", "fid", "n_node", "depth");
        for t in &self.per_target {
            let _ = writeln!(
                s,
                "{:>6} {:>6} {:>6} {:>12.4} {:>8} {:>6}{}",
                t.target_mode,
                t.target_size,
                t.node_id,
                t.fid,
                t.node_size,
                t.node_depth,
                if t.flagged { "  (above warning level)" } else { "" }
            );
        }
        let _ = writeln!(s, "total cost: {:.6}", self.total_cost);
        let _ = writeln!(
            s,
            "selected: {} nodes, {} samples",
            self.selected_nodes.len(),
            self.selected_samples
        );
        if let Some(p) = self.pruned_samples {
            let _ = writeln!(s, "after pruning: {p} samples");
        }
        let total: usize = self.composition.values().sum();
        for (label, count) in &self.composition {
            let _ = writeln!(
                s,
                "  {label}: {count} ({:.1}%)",
                100.0 * *count as f64 / total.max(1) as f64
            );
        }
        s
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub selected_samples: usize,
    pub server_samples: usize,
    pub target_samples: usize,
    pub fid_selected: f64,
    pub fid_full_server: f64,
}

impl GapReport {
    pub fn to_text(&self) -> String {
        format!(
            "FID(selected, target)    = {:.6}  ({} samples)\nFID(full server, target) = {:.6}  ({} samples)\n",
            self.fid_selected, self.selected_samples, self.fid_full_server, self.server_samples
        )
    }
}

/// Domain gap of the manifest's rows and of the whole server to the target.
pub fn evaluate(manifest: &Manifest, server: &FeatureMatrix, target: &FeatureMatrix, eps: f64) -> Result<GapReport> {
    let index = server.id_index();
    let rows = manifest
        .entries
        .iter()
        .map(|(id, _)| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| BmmError::Validation(format!("manifest sample_id {id:?} is not in the server features")))
        })
        .collect::<Result<Vec<_>>>()?;
    let target_stats = gaussian_stats(target, &(0..target.n()).collect::<Vec<_>>())?;
    let full: Vec<usize> = (0..server.n()).collect();
    let fid_full_server = fid_with_eps(&gaussian_stats(server, &full)?, &target_stats, eps)?;
    let fid_selected = fid_with_eps(&gaussian_stats(server, &rows)?, &target_stats, eps)?;
    Ok(GapReport {
        selected_samples: rows.len(),
        server_samples: server.n(),
        target_samples: target.n(),
        fid_selected,
        fid_full_server,
    })
}

/// Budgeted pruning of a manifest. Without node membership at hand, the
/// stratified strategy uses the dataset labels as strata.
pub fn prune_manifest(manifest: &Manifest, budget: Budget, strategy: Strategy, seed: u64) -> Result<Manifest> {
    let groups: Vec<Vec<usize>> = match strategy {
        Strategy::Uniform => vec![(0..manifest.entries.len()).collect()],
        Strategy::Stratified => {
            let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, (_, label)) in manifest.entries.iter().enumerate() {
                by_label.entry(label.as_str()).or_default().push(i);
            }
            by_label.into_values().collect()
        }
    };
    let kept = prune_rows(&groups, budget, seed)?;
    let mut metadata = manifest.metadata.clone();
    metadata.insert(
        "budget".into(),
        match budget {
            Budget::Fraction(f) => format!("fraction:{f}"),
            Budget::Absolute(n) => format!("absolute:{n}"),
        },
    );
    metadata.insert(
        "strategy".into(),
        match strategy {
            Strategy::Uniform => "uniform".into(),
            Strategy::Stratified => "stratified".into(),
        },
    );
    metadata.insert("prune_seed".into(), seed.to_string());
    Ok(Manifest {
        entries: kept.into_iter().map(|i| manifest.entries[i].clone()).collect(),
        metadata,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Matching over every tree node.
    Hierarchical,
    /// Matching over the balanced leaves only.
    Flat,
    /// Per-target argmin over every tree node, duplicates allowed.
    DirectMatch,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Hierarchical => "hierarchical",
            Variant::Flat => "flat",
            Variant::DirectMatch => "direct_match",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub variant: Variant,
    pub leaves: usize,
    pub target_clusters: usize,
    pub fid: f64,
    pub precision: f64,
    pub distinct_nodes: usize,
    pub unmatched: usize,
    pub runtime_s: f64,
}

pub const BENCH_CSV_HEADER: &str = "variant,J,L,fid,precision,distinct_nodes,unmatched,runtime_s";

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.6}",
            self.variant.name(),
            self.leaves,
            self.target_clusters,
            self.fid,
            self.precision,
            self.distinct_nodes,
            self.unmatched,
            self.runtime_s
        )
    }
}

/// Runs the three matching variants for every `(J, L)` cell of the sweep.
pub fn bench(world: &PlantedWorld, leaves: &[usize], clusters: &[usize], cfg: &PipelineConfig) -> Result<Vec<BenchRow>> {
    let (server, target, truth) = generate(world)?;
    let target_all = gaussian_stats(&target, &(0..target.n()).collect::<Vec<_>>())?;
    let selected_fid = |rows: &[usize]| -> Result<f64> {
        fid_with_eps(&gaussian_stats(&server, rows)?, &target_all, cfg.eps_cov)
    };
    let mut rows = Vec::new();
    for &j in leaves {
        let t0 = Instant::now();
        let tree = build_server(&server, j, cfg.seed, cfg.linkage)?;
        let build_time = t0.elapsed().as_secs_f64();
        for &l in clusters {
            let (clusters_fit, stats) = target_modes(&target, l, cfg.seed)?;
            let cluster_truth = truth.cluster_truth(&clusters_fit);

            for variant in [Variant::Hierarchical, Variant::Flat, Variant::DirectMatch] {
                let t1 = Instant::now();
                let candidates = if variant == Variant::Flat {
                    Candidates::LeavesOnly
                } else {
                    Candidates::AllNodes
                };
                // flat matching has only J columns; such cells have no row
                if variant == Variant::Flat && l > j {
                    continue;
                }
                let problem = build_problem(&tree, &stats, candidates, cfg.eps_cov)?;
                let sel = if variant == Variant::DirectMatch {
                    select_direct(&tree, &direct_match(&problem, true)?, &problem)?
                } else {
                    select_training_set(&tree, &solve_assignment(&problem)?, &problem)?
                };
                let fid = selected_fid(&sel.sample_rows)?;
                rows.push(BenchRow {
                    variant,
                    leaves: j,
                    target_clusters: l,
                    fid,
                    precision: matching_precision(&sel, &cluster_truth, &truth.server_rows, &tree),
                    distinct_nodes: sel.selected_nodes.len(),
                    unmatched: sel.unmatched(),
                    runtime_s: build_time + t1.elapsed().as_secs_f64(),
                });
            }
        }
    }
    Ok(rows)
}
