//! Gaussian mode statistics and the Fréchet distance between them.
//!
//! The matrix square-root term is evaluated through the symmetric product
//! `A^{1/2} B A^{1/2}`, whose eigenvalues equal those of `A B`, so only
//! symmetric eigendecompositions are needed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::clustering::ModeTree;
use crate::dataset_io::FeatureMatrix;
use crate::error::{BmmError, Result};
use crate::matching::CostMatrix;

pub const DEFAULT_EPS_COV: f64 = 1e-6;

const SYMMETRY_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-8;

/// Mean, covariance and sample count of one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeStats {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    count: usize,
}

impl ModeStats {
    /// Builds stats from a mean and a row-major covariance, checking symmetry
    /// and positive semi-definiteness.
    pub fn from_parts(mean: Vec<f64>, cov_row_major: Vec<f64>, count: usize, d: usize) -> Result<Self> {
        if mean.len() != d || cov_row_major.len() != d * d {
            return Err(BmmError::Validation(format!(
                "stats shape mismatch: mean {} / cov {} for d = {d}",
                mean.len(),
                cov_row_major.len()
            )));
        }
        if count < 2 {
            return Err(BmmError::InsufficientSamples(format!(
                "mode statistics need at least 2 samples, got {count}"
            )));
        }
        if mean.iter().chain(&cov_row_major).any(|v| !v.is_finite()) {
            return Err(BmmError::Validation("non-finite mode statistics".into()));
        }
        let cov = DMatrix::from_row_slice(d, d, &cov_row_major);
        for i in 0..d {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(BmmError::Validation(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let min_eig = SymmetricEigen::new(cov.clone()).eigenvalues.min();
        if min_eig < -PSD_TOL * cov.trace().max(1.0) {
            return Err(BmmError::Validation(format!(
                "covariance is not positive semi-definite (min eigenvalue {min_eig:e})"
            )));
        }
        Ok(ModeStats {
            mean: DVector::from_vec(mean),
            cov,
            count,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn cov_row_major(&self) -> Vec<f64> {
        self.cov.transpose().as_slice().to_vec()
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

/// Mean and unbiased covariance of the selected rows.
pub fn gaussian_stats(features: &FeatureMatrix, rows: &[usize]) -> Result<ModeStats> {
    let n = rows.len();
    if n < 2 {
        return Err(BmmError::InsufficientSamples(format!(
            "mode statistics need at least 2 samples, got {n}"
        )));
    }
    let d = features.d();
    if let Some(&bad) = rows.iter().find(|&&r| r >= features.n()) {
        return Err(BmmError::Validation(format!(
            "row {bad} out of range for {} rows",
            features.n()
        )));
    }
    let mut mean = DVector::<f64>::zeros(d);
    for &r in rows {
        for (m, &v) in mean.iter_mut().zip(features.row(r)) {
            *m += v as f64;
        }
    }
    mean /= n as f64;

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0f64; d];
    for &r in rows {
        for (c, (&v, &m)) in centered.iter_mut().zip(features.row(r).iter().zip(mean.iter())) {
            *c = v as f64 - m;
        }
        for j in 0..d {
            let cj = centered[j];
            for i in j..d {
                cov[(i, j)] += centered[i] * cj;
            }
        }
    }
    for j in 0..d {
        for i in j..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(ModeStats { mean, cov, count: n })
}

/// Per-mode quantities reused across every pair the mode takes part in.
#[derive(Debug, Clone)]
pub struct PreparedStats<'a> {
    stats: &'a ModeStats,
    min_eig: f64,
    sqrt: DMatrix<f64>,
    sqrt_reg: DMatrix<f64>,
    eps: f64,
}

impl<'a> PreparedStats<'a> {
    pub fn new(stats: &'a ModeStats, eps: f64) -> Result<Self> {
        let eig = SymmetricEigen::new(stats.cov.clone());
        let min_eig = eig.eigenvalues.min();
        let sqrt = psd_sqrt_from(&eig, 0.0);
        let sqrt_reg = psd_sqrt_from(&eig, eps);
        if sqrt.iter().chain(sqrt_reg.iter()).any(|v| !v.is_finite()) {
            return Err(BmmError::Numerical(format!(
                "covariance square root is not finite (min eigenvalue {min_eig:e})"
            )));
        }
        Ok(PreparedStats {
            stats,
            min_eig,
            sqrt,
            sqrt_reg,
            eps,
        })
    }

    pub fn stats(&self) -> &ModeStats {
        self.stats
    }
}

fn psd_sqrt_from(eig: &SymmetricEigen<f64, nalgebra::Dyn>, shift: f64) -> DMatrix<f64> {
    let roots = eig.eigenvalues.map(|l| (l + shift).max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let scaled = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * roots[j]);
    let s = &scaled * v.transpose();
    (&s + s.transpose()) * 0.5
}

/// Trace of the square root of a symmetric PSD matrix, negative
/// eigenvalues clamped to zero.
fn trace_sqrt_psd(m: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum()
}

/// Fréchet distance between two prepared modes.
pub fn fid_prepared(a: &PreparedStats<'_>, b: &PreparedStats<'_>) -> Result<f64> {
    let (sa, sb) = (a.stats, b.stats);
    if sa.dim() != sb.dim() {
        return Err(BmmError::Parameter(format!(
            "dimension mismatch: {} vs {}",
            sa.dim(),
            sb.dim()
        )));
    }
    let eps = a.eps.max(b.eps);
    let regularize = a.min_eig < eps || b.min_eig < eps;
    let d = sa.dim();
    let shift = if regularize { eps } else { 0.0 };
    let sqrt_a = if regularize { &a.sqrt_reg } else { &a.sqrt };
    let mut cov_b = sb.cov.clone();
    for i in 0..d {
        cov_b[(i, i)] += shift;
    }
    let m = sqrt_a * &cov_b * sqrt_a;
    let m = (&m + m.transpose()) * 0.5;
    let tr_sqrt = trace_sqrt_psd(m);

    let mean_term = (&sa.mean - &sb.mean).norm_squared();
    let trace_term = sa.cov.trace() + sb.cov.trace() + 2.0 * d as f64 * shift;
    let value = mean_term + trace_term - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(BmmError::Numerical(format!(
            "FID not finite: |dmu|^2 = {mean_term:e}, tr = {trace_term:e}, tr sqrt = {tr_sqrt:e}, \
             min eigenvalues {:e} / {:e}, regularized = {regularize}",
            a.min_eig, b.min_eig
        )));
    }
    Ok(value.max(0.0))
}

pub fn fid_with_eps(a: &ModeStats, b: &ModeStats, eps: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(BmmError::Parameter(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    fid_prepared(&PreparedStats::new(a, eps)?, &PreparedStats::new(b, eps)?)
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`, clamped at zero.
pub fn fid(a: &ModeStats, b: &ModeStats) -> Result<f64> {
    fid_with_eps(a, b, DEFAULT_EPS_COV)
}

/// `L x H` matrix whose entry `(y, x)` is the FID between target mode `y`
/// and tree node `x`.
pub fn cost_matrix(tree: &ModeTree, targets: &[ModeStats], eps: f64) -> Result<CostMatrix> {
    let nodes: Vec<&ModeStats> = tree.nodes().iter().map(|n| &n.stats).collect();
    cost_matrix_between(targets, &nodes, eps)
}

/// Same as [`cost_matrix`] over an explicit list of candidate modes.
pub fn cost_matrix_between(targets: &[ModeStats], candidates: &[&ModeStats], eps: f64) -> Result<CostMatrix> {
    let mut all = targets.iter().chain(candidates.iter().copied());
    if let Some(first) = all.next() {
        if let Some(other) = all.find(|s| s.dim() != first.dim()) {
            return Err(BmmError::Parameter(format!(
                "dimension mismatch: {} vs {}",
                first.dim(),
                other.dim()
            )));
        }
    }
    let prep_t = targets
        .par_iter()
        .map(|s| PreparedStats::new(s, eps))
        .collect::<Result<Vec<_>>>()?;
    let prep_c = candidates
        .par_iter()
        .map(|s| PreparedStats::new(s, eps))
        .collect::<Result<Vec<_>>>()?;
    let h = candidates.len();
    let data = (0..targets.len() * h)
        .into_par_iter()
        .map(|k| {
            let (y, x) = (k / h, k % h);
            fid_prepared(&prep_t[y], &prep_c[x])
                .map_err(|e| BmmError::Numerical(format!("target mode {y} vs node {x}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    CostMatrix::new(targets.len(), h, data)
}
