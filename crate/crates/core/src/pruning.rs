//! Budgeted subsampling of a searched training set.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::ModeTree;
use crate::error::{BmmError, Result};
use crate::matching::SelectionResult;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    /// Keep `round(value * size)` rows, `value` in (0, 1].
    Fraction(f64),
    Absolute(usize),
}

impl Budget {
    /// Number of rows to keep out of `size`.
    pub fn resolve(&self, size: usize) -> Result<usize> {
        match *self {
            Budget::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                Err(BmmError::Parameter(format!("budget fraction {f} is outside (0, 1]")))
            }
            Budget::Fraction(f) => Ok(((f * size as f64).round() as usize).min(size)),
            Budget::Absolute(0) => Err(BmmError::Parameter("absolute budget must be positive".into())),
            Budget::Absolute(m) if m > size => Err(BmmError::Parameter(format!(
                "budget of {m} rows exceeds the {size} selected rows"
            ))),
            Budget::Absolute(m) => Ok(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    #[default]
    Uniform,
    /// Per matched node, proportional to node size.
    Stratified,
}

impl FromStr for Strategy {
    type Err = BmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(Strategy::Uniform),
            "stratified" => Ok(Strategy::Stratified),
            other => Err(BmmError::Parameter(format!("unknown pruning strategy {other:?}"))),
        }
    }
}

/// Largest-remainder apportionment of `total` over `weights`. Remainder
/// ties go to the lower index.
pub fn largest_remainder(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut counts: Vec<usize> = weights.iter().map(|&w| w * total / sum).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // remainder of w*total/sum, compared exactly as integers
    order.sort_by(|&a, &b| {
        let ra = weights[a] * total % sum;
        let rb = weights[b] * total % sum;
        rb.cmp(&ra).then(a.cmp(&b))
    });
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Strata of a selection: each selected node's rows not already claimed by
/// an earlier selected node.
pub fn strata(sel: &SelectionResult, tree: &ModeTree) -> Vec<Vec<usize>> {
    let mut claimed = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for &id in &sel.selected_nodes {
        let rows: Vec<usize> = tree
            .node(id)
            .members
            .iter()
            .copied()
            .filter(|r| claimed.insert(*r))
            .collect();
        if !rows.is_empty() {
            out.push(rows);
        }
    }
    out
}

/// Keeps exactly the budgeted number of rows. Stratified pruning needs the
/// tree to recover which node each row came from.
pub fn prune(
    sel: &SelectionResult,
    tree: &ModeTree,
    budget: Budget,
    strategy: Strategy,
    seed: u64,
) -> Result<SelectionResult> {
    let groups = match strategy {
        Strategy::Uniform => vec![sel.sample_rows.clone()],
        Strategy::Stratified => strata(sel, tree),
    };
    let kept = prune_rows(&groups, budget, seed)?;
    let mut composition = BTreeMap::new();
    for &r in &kept {
        *composition.entry(tree.dataset_labels()[r].clone()).or_insert(0) += 1;
    }
    Ok(SelectionResult {
        selected_nodes: sel.selected_nodes.clone(),
        sample_rows: kept,
        per_target: sel.per_target.clone(),
        composition,
    })
}

/// Samples the budget across `groups` (largest-remainder allocation by group
/// size, uniform without replacement inside each group). Returns the kept
/// items sorted.
pub fn prune_rows(groups: &[Vec<usize>], budget: Budget, seed: u64) -> Result<Vec<usize>> {
    let size: usize = groups.iter().map(Vec::len).sum();
    let m = budget.resolve(size)?;
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let alloc = largest_remainder(&sizes, m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::with_capacity(m);
    for (group, &take) in groups.iter().zip(&alloc) {
        if take == group.len() {
            kept.extend_from_slice(group);
            continue;
        }
        let mut picks = index::sample(&mut rng, group.len(), take).into_vec();
        picks.sort_unstable();
        kept.extend(picks.into_iter().map(|i| group[i]));
    }
    kept.sort_unstable();
    Ok(kept)
}
