//! One-to-one assignment of target modes to server tree nodes and the
//! deduplicated training set it selects.

use std::collections::{BTreeMap, BTreeSet};

use crate::clustering::ModeTree;
use crate::error::{BmmError, Result};

/// Dense row-major `rows x cols` matrix of finite costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(BmmError::Validation(format!(
                "cost matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(BmmError::Validation("ragged cost matrix".into()));
        }
        CostMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scaled(&self, factor: f64) -> CostMatrix {
        CostMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// CSV dump: header `target,<col labels...>`, one line per row.
    pub fn to_csv(&self, col_labels: &[usize]) -> String {
        let mut out = String::from("target");
        for c in col_labels {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for r in 0..self.rows {
            out.push_str(&r.to_string());
            for v in self.row(r) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Sum of `cost[i][sigma[i]]` accumulated in row order.
pub fn assignment_cost(cost: &CostMatrix, sigma: &[usize]) -> f64 {
    sigma.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum()
}

/// Two totals within this distance of the optimum count as tied.
pub fn tie_tolerance(optimum: f64) -> f64 {
    1e-9 * (1.0 + optimum.abs())
}

/// Target modes (rows) against candidate tree nodes (columns).
#[derive(Debug, Clone)]
pub struct AssignmentProblem {
    pub cost: CostMatrix,
    pub target_ids: Vec<usize>,
    /// Tree node id of each column.
    pub node_ids: Vec<usize>,
}

impl AssignmentProblem {
    /// Problem over all nodes of a tree, columns in node-id order.
    pub fn new(cost: CostMatrix) -> Result<Self> {
        let p = AssignmentProblem {
            target_ids: (0..cost.rows()).collect(),
            node_ids: (0..cost.cols()).collect(),
            cost,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_node_ids(cost: CostMatrix, node_ids: Vec<usize>) -> Result<Self> {
        let p = AssignmentProblem {
            target_ids: (0..cost.rows()).collect(),
            node_ids,
            cost,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (l, h) = (self.cost.rows(), self.cost.cols());
        if self.target_ids.len() != l || self.node_ids.len() != h {
            return Err(BmmError::Validation(format!(
                "labels ({} targets, {} nodes) do not match a {l}x{h} cost matrix",
                self.target_ids.len(),
                self.node_ids.len()
            )));
        }
        if l > h {
            return Err(BmmError::Infeasible(format!(
                "{l} target modes cannot be matched one-to-one into {h} nodes"
            )));
        }
        for r in 0..l {
            for (c, &v) in self.cost.row(r).iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(BmmError::Validation(format!(
                        "cost ({r},{c}) = {v} is not a finite non-negative number"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Column index (not node id) chosen for each target row.
    pub sigma: Vec<usize>,
    pub total_cost: f64,
}

struct Solved {
    sigma: Vec<usize>,
    row_pot: Vec<f64>,
    col_pot: Vec<f64>,
}

/// Shortest-augmenting-path Hungarian method for `n <= m`.
/// `cost(i, j)` is queried lazily so sub-problems need no copies.
fn hungarian(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Solved {
    debug_assert!(n <= m);
    // 1-based with index 0 as the virtual source, as in the classic formulation.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![0.0f64; m + 1];
    let mut used = vec![false; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut sigma = vec![0usize; n];
    for j in 1..=m {
        if p[j] > 0 {
            sigma[p[j] - 1] = j - 1;
        }
    }
    Solved {
        sigma,
        row_pot: u[1..].to_vec(),
        col_pot: v[1..].to_vec(),
    }
}

/// Minimum-cost injective map from rows to columns. Among optima (totals
/// within [`tie_tolerance`]) the lexicographically smallest `sigma` wins.
pub fn solve_assignment(p: &AssignmentProblem) -> Result<Assignment> {
    p.validate()?;
    let cost = &p.cost;
    let (l, h) = (cost.rows(), cost.cols());
    if l == 0 {
        return Ok(Assignment {
            sigma: Vec::new(),
            total_cost: 0.0,
        });
    }
    let solved = hungarian(l, h, |i, j| cost.get(i, j));
    let mut sigma = solved.sigma;
    let optimum = assignment_cost(cost, &sigma);
    let tol = tie_tolerance(optimum);
    let max_abs = cost.data.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    // Any optimal assignment only uses edges with zero reduced cost under the
    // optimal potentials; the slack absorbs rounding in the potentials.
    let rc_slack = 1e-7 * (1.0 + max_abs) * l as f64;

    let mut used = vec![false; h];
    let mut prefix = 0.0;
    for i in 0..l {
        for j in 0..sigma[i] {
            if used[j] || cost.get(i, j) - solved.row_pot[i] - solved.col_pot[j] > rc_slack {
                continue;
            }
            let rest_rows: Vec<usize> = (i + 1..l).collect();
            let rest_cols: Vec<usize> = (0..h).filter(|&c| !used[c] && c != j).collect();
            let sub = hungarian(rest_rows.len(), rest_cols.len(), |r, c| {
                cost.get(rest_rows[r], rest_cols[c])
            });
            let sub_total: f64 = sub
                .sigma
                .iter()
                .enumerate()
                .map(|(r, &c)| cost.get(rest_rows[r], rest_cols[c]))
                .sum();
            if prefix + cost.get(i, j) + sub_total <= optimum + tol {
                sigma[i] = j;
                for (r, &c) in sub.sigma.iter().enumerate() {
                    sigma[i + 1 + r] = rest_cols[c];
                }
                break;
            }
        }
        used[sigma[i]] = true;
        prefix += cost.get(i, sigma[i]);
    }

    Ok(Assignment {
        total_cost: assignment_cost(cost, &sigma),
        sigma,
    })
}

/// Greedy per-row argmin baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectMatch {
    /// Chosen column per target; `None` when dropped as a duplicate.
    pub sigma: Vec<Option<usize>>,
    /// Sum over matched targets only.
    pub total_cost: f64,
}

impl DirectMatch {
    pub fn unmatched(&self) -> usize {
        self.sigma.iter().filter(|s| s.is_none()).count()
    }

    pub fn distinct_columns(&self) -> usize {
        self.sigma.iter().flatten().collect::<BTreeSet<_>>().len()
    }
}

pub fn direct_match(p: &AssignmentProblem, allow_duplicates: bool) -> Result<DirectMatch> {
    p.validate()?;
    let cost = &p.cost;
    let mut taken = vec![false; cost.cols()];
    let mut sigma = Vec::with_capacity(cost.rows());
    let mut total_cost = 0.0;
    for i in 0..cost.rows() {
        let best = cost
            .row(i)
            .iter()
            .enumerate()
            .fold(None, |acc: Option<(usize, f64)>, (j, &v)| match acc {
                Some((_, bv)) if bv <= v => acc,
                _ => Some((j, v)),
            })
            .map(|(j, _)| j);
        let pick = best.filter(|&j| allow_duplicates || !taken[j]);
        if let Some(j) = pick {
            taken[j] = true;
            total_cost += cost.get(i, j);
        }
        sigma.push(pick);
    }
    Ok(DirectMatch { sigma, total_cost })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetMatch {
    pub node_id: usize,
    pub fid: f64,
}

/// The searched training set.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Matched node ids in target order, first occurrence only.
    pub selected_nodes: Vec<usize>,
    /// Sorted, deduplicated server row indices.
    pub sample_rows: Vec<usize>,
    /// Indexed by target mode; `None` for targets left unmatched.
    pub per_target: Vec<Option<TargetMatch>>,
    pub composition: BTreeMap<String, usize>,
}

impl SelectionResult {
    pub fn unmatched(&self) -> usize {
        self.per_target.iter().filter(|t| t.is_none()).count()
    }
}

/// Union of the matched nodes' members, each row kept once.
pub fn select_training_set(tree: &ModeTree, a: &Assignment, p: &AssignmentProblem) -> Result<SelectionResult> {
    if a.sigma.len() != p.cost.rows() {
        return Err(BmmError::Validation(format!(
            "assignment covers {} targets, problem has {}",
            a.sigma.len(),
            p.cost.rows()
        )));
    }
    let matches: Vec<Option<usize>> = a.sigma.iter().map(|&c| Some(c)).collect();
    select_columns(tree, p, &matches)
}

/// Selection for a direct-match result (possibly with unmatched targets).
pub fn select_direct(tree: &ModeTree, dm: &DirectMatch, p: &AssignmentProblem) -> Result<SelectionResult> {
    select_columns(tree, p, &dm.sigma)
}

fn select_columns(tree: &ModeTree, p: &AssignmentProblem, columns: &[Option<usize>]) -> Result<SelectionResult> {
    let mut selected_nodes = Vec::new();
    let mut per_target = Vec::with_capacity(columns.len());
    for (y, col) in columns.iter().enumerate() {
        let Some(c) = *col else {
            per_target.push(None);
            continue;
        };
        let node_id = *p.node_ids.get(c).ok_or_else(|| {
            BmmError::Validation(format!("target {y} matched to column {c} outside the problem"))
        })?;
        if node_id >= tree.node_count() {
            return Err(BmmError::Validation(format!("target {y} matched to unknown node {node_id}")));
        }
        if !selected_nodes.contains(&node_id) {
            selected_nodes.push(node_id);
        }
        per_target.push(Some(TargetMatch {
            node_id,
            fid: p.cost.get(y, c),
        }));
    }
    let rows: BTreeSet<usize> = selected_nodes
        .iter()
        .flat_map(|&id| tree.node(id).members.iter().copied())
        .collect();
    let sample_rows: Vec<usize> = rows.into_iter().collect();
    let mut composition = BTreeMap::new();
    for &r in &sample_rows {
        *composition.entry(tree.dataset_labels()[r].clone()).or_insert(0) += 1;
    }
    Ok(SelectionResult {
        selected_nodes,
        sample_rows,
        per_target,
        composition,
    })
}
