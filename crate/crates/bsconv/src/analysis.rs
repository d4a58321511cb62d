//! Kernel-correlation analysis: per-filter PCA along the depth axis, the
//! explained-variance histograms built from it, and the truncated-SVD
//! low-rank factorization used to seed subspace weights.
//!
//! The question the PCA answers: how much of a trained `M x K x K` filter is
//! a single `K x K` template scaled along the depth axis? Split the kernel
//! into its `M` depth slices, run PCA over them, and report the variance
//! fraction captured by the first principal component. A blueprint filter is
//! rank one by construction, so it scores 1; trained standard convolutions
//! typically score around 0.5, which is the empirical motivation for the
//! blueprint parameterization.
//!
//! All linear algebra here runs in f64 internally regardless of the input
//! width. The SVD is a one-sided Jacobi — small matrices only, but simple
//! and accurate to near machine precision.

use std::error::Error;
use std::fmt;

use crate::tensor::{Scalar, ShapeError, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum AnalysisError {
    /// Input contains NaN or infinity.
    NonFinite,
    /// Requested factorization rank outside `[1, min(rows, cols)]`.
    InvalidRank { rank: usize, max: usize },
    /// PCA needs at least two depth slices.
    TooFewSlices { got: usize },
    /// One group label required per filter.
    GroupCount { expected: usize, got: usize },
    /// Histograms need at least one bin.
    NoBins,
    Shape(ShapeError),
}

impl fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalysisError::NonFinite => write!(f, "input contains non-finite values"),
            AnalysisError::InvalidRank { rank, max } => {
                write!(f, "rank {rank} outside valid range 1..={max}")
            }
            AnalysisError::TooFewSlices { got } => {
                write!(f, "per-filter PCA needs >= 2 depth slices, got {got}")
            }
            AnalysisError::GroupCount { expected, got } => {
                write!(f, "expected {expected} group labels (one per filter), got {got}")
            }
            AnalysisError::NoBins => write!(f, "histogram needs at least one bin"),
            AnalysisError::Shape(e) => write!(f, "{e}"),
        }
    }
}

impl Error for AnalysisError {}

impl From<ShapeError> for AnalysisError {
    fn from(e: ShapeError) -> Self {
        AnalysisError::Shape(e)
    }
}

/// Thin singular value decomposition `A = U diag(sigma) V^T`.
///
/// `u` is `[rows, k]`, `v` is `[cols, k]` with `k = min(rows, cols)`; both
/// have orthonormal columns and `sigma` is descending and nonnegative.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor<f64>,
    pub sigma: Vec<f64>,
    pub v: Tensor<f64>,
}

/// One-sided Jacobi SVD. Intended for small matrices (up to roughly
/// 1024 x 1024); converges to near machine precision.
pub fn svd_small<S: Scalar>(a: &Tensor<S>) -> Result<Svd, AnalysisError> {
    if a.ndim() != 2 {
        return Err(ShapeError::RankExpected {
            expected: 2,
            got: a.ndim(),
        }
        .into());
    }
    if !a.all_finite() {
        return Err(AnalysisError::NonFinite);
    }
    let rows = a.extent(0);
    let cols = a.extent(1);
    if rows >= cols {
        let cols_of_a: Vec<Vec<f64>> = (0..cols)
            .map(|c| (0..rows).map(|r| a.get(&[r, c]).to_f64()).collect())
            .collect();
        let (u_cols, sigma, v_cols) = jacobi_columns(cols_of_a, rows, cols);
        Ok(Svd {
            u: cols_to_tensor(&u_cols, rows),
            sigma,
            v: cols_to_tensor(&v_cols, cols),
        })
    } else {
        // factor the transpose and swap the factors
        let cols_of_at: Vec<Vec<f64>> = (0..rows)
            .map(|c| (0..cols).map(|r| a.get(&[c, r]).to_f64()).collect())
            .collect();
        let (u_cols, sigma, v_cols) = jacobi_columns(cols_of_at, cols, rows);
        Ok(Svd {
            u: cols_to_tensor(&v_cols, rows),
            sigma,
            v: cols_to_tensor(&u_cols, cols),
        })
    }
}

fn cols_to_tensor(cols: &[Vec<f64>], rows: usize) -> Tensor<f64> {
    let n = cols.len();
    let mut out = Tensor::zeros(&[rows, n]).unwrap();
    let d = out.data_mut();
    for (c, col) in cols.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            d[r * n + c] = x;
        }
    }
    out
}

/// Core sweep loop. `work` holds the `n` columns (length `m` each, m >= n);
/// returns orthonormal U columns, descending singular values, and V columns.
fn jacobi_columns(
    mut work: Vec<Vec<f64>>,
    m: usize,
    n: usize,
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    const TOL: f64 = 1e-15;
    const MAX_SWEEPS: usize = 64;

    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n.saturating_sub(1) {
            for j in i + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0f64, 0.0f64, 0.0f64);
                for r in 0..m {
                    alpha += work[i][r] * work[i][r];
                    beta += work[j][r] * work[j][r];
                    gamma += work[i][r] * work[j][r];
                }
                if gamma == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let (wi, wj) = (work[i][r], work[j][r]);
                    work[i][r] = c * wi - s * wj;
                    work[j][r] = s * wi + c * wj;
                }
                for r in 0..n {
                    let (vi, vj) = (v[i][r], v[j][r]);
                    v[i][r] = c * vi - s * vj;
                    v[j][r] = s * vi + c * vj;
                }
                rotated = true;
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = work
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap());

    let scale: f64 = norms.iter().fold(0.0f64, |acc, &x| acc.max(x));
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    for &idx in &order {
        let norm = norms[idx];
        sigma.push(norm);
        v_cols.push(v[idx].clone());
        if norm > scale * 1e-290 && norm > 0.0 {
            u_cols.push(work[idx].iter().map(|x| x / norm).collect());
        } else {
            u_cols.push(vec![0.0; m]); // filled below
        }
    }

    // replace exactly-zero columns with an orthonormal completion so U keeps
    // orthonormal columns even for rank-deficient input
    for c in 0..n {
        if u_cols[c].iter().all(|&x| x == 0.0) {
            let mut best: Option<(f64, Vec<f64>)> = None;
            for e in 0..m {
                let mut cand = vec![0.0; m];
                cand[e] = 1.0;
                for other in 0..n {
                    if other == c || u_cols[other].iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let dot: f64 = cand.iter().zip(&u_cols[other]).map(|(a, b)| a * b).sum();
                    for r in 0..m {
                        cand[r] -= dot * u_cols[other][r];
                    }
                }
                let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
                if best.as_ref().map_or(true, |(bn, _)| norm > *bn) {
                    best = Some((norm, cand));
                }
            }
            let (norm, mut cand) = best.expect("m >= 1");
            for x in cand.iter_mut() {
                *x /= norm;
            }
            u_cols[c] = cand;
        }
    }

    (u_cols, sigma, v_cols)
}

/// Truncated-SVD factorization `W ~ WA * WB` with `WA = U_r Sigma_r` of shape
/// `[N, rank]` and `WB = V_r^T` of shape `[rank, M]`. The rows of `WB` are
/// orthonormal and the reconstruction is rank-`rank` optimal in Frobenius
/// norm (the discarded energy is exactly the sum of the squared trailing
/// singular values).
pub fn low_rank_factorize<S: Scalar>(
    weights: &Tensor<S>,
    rank: usize,
) -> Result<(Tensor<S>, Tensor<S>), AnalysisError> {
    if weights.ndim() != 2 {
        return Err(ShapeError::RankExpected {
            expected: 2,
            got: weights.ndim(),
        }
        .into());
    }
    let n = weights.extent(0);
    let m = weights.extent(1);
    let max = n.min(m);
    if rank == 0 || rank > max {
        return Err(AnalysisError::InvalidRank { rank, max });
    }
    let svd = svd_small(weights)?;
    let mut wa = Tensor::<f64>::zeros(&[n, rank]).unwrap();
    let mut wb = Tensor::<f64>::zeros(&[rank, m]).unwrap();
    for r in 0..rank {
        for row in 0..n {
            wa.set(&[row, r], svd.u.get(&[row, r]) * svd.sigma[r]);
        }
        for col in 0..m {
            wb.set(&[r, col], svd.v.get(&[col, r]));
        }
    }
    Ok((wa.convert(), wb.convert()))
}

/// Spectrum of one filter's depth slices.
#[derive(Clone, Debug)]
pub struct FilterPcaResult {
    /// `sigma_i^2 / sum(sigma^2)`, descending; sums to 1.
    pub explained_ratios: Vec<f64>,
    /// Total (centered) energy `sum(sigma^2)`.
    pub total_variance: f64,
    /// First principal component reshaped to `[K, K]` — the blueprint the
    /// filter is closest to.
    pub pc1_blueprint: Tensor<f64>,
    /// Projection of each depth slice onto the first component, length `M`.
    pub scores: Vec<f64>,
    /// Per-position slice mean, `[K, K]`; zero when uncentered.
    pub mean: Tensor<f64>,
}

/// Outcome of [`pca_filter`]: filters whose slices carry (almost) no variance
/// have no meaningful spectrum and are flagged instead of assigned a ratio.
#[derive(Clone, Debug)]
pub enum PcaOutcome {
    Spectrum(FilterPcaResult),
    Degenerate { total_variance: f64 },
}

impl PcaOutcome {
    pub fn spectrum(&self) -> Option<&FilterPcaResult> {
        match self {
            PcaOutcome::Spectrum(r) => Some(r),
            PcaOutcome::Degenerate { .. } => None,
        }
    }
}

/// Threshold below which a filter's total depth-axis variance counts as zero.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Per-filter PCA along the depth axis of a `[M, K, K]` kernel: the `M`
/// slices are the samples, optionally mean-centered.
pub fn pca_filter<S: Scalar>(kernel: &Tensor<S>, center: bool) -> Result<PcaOutcome, AnalysisError> {
    if kernel.ndim() != 3 {
        return Err(ShapeError::RankExpected {
            expected: 3,
            got: kernel.ndim(),
        }
        .into());
    }
    let m = kernel.extent(0);
    let k = kernel.extent(1);
    if kernel.extent(2) != k {
        return Err(ShapeError::ShapeMismatch {
            left: kernel.shape().to_vec(),
            right: vec![m, k, k],
        }
        .into());
    }
    if m < 2 {
        return Err(AnalysisError::TooFewSlices { got: m });
    }
    if !kernel.all_finite() {
        return Err(AnalysisError::NonFinite);
    }
    let kk = k * k;
    let mut samples = Tensor::<f64>::zeros(&[m, kk]).unwrap();
    for row in 0..m {
        for col in 0..kk {
            samples.set(&[row, col], kernel.data()[row * kk + col].to_f64());
        }
    }
    let mut mean = Tensor::<f64>::zeros(&[k, k]).unwrap();
    if center {
        for col in 0..kk {
            let mu: f64 = (0..m).map(|row| samples.get(&[row, col])).sum::<f64>() / m as f64;
            mean.data_mut()[col] = mu;
            for row in 0..m {
                let v = samples.get(&[row, col]) - mu;
                samples.set(&[row, col], v);
            }
        }
    }
    let total_variance: f64 = samples.data().iter().map(|x| x * x).sum();
    if total_variance < DEGENERATE_VARIANCE {
        return Ok(PcaOutcome::Degenerate { total_variance });
    }

    let svd = svd_small(&samples)?;
    let energy: f64 = svd.sigma.iter().map(|s| s * s).sum();
    let explained_ratios: Vec<f64> = svd.sigma.iter().map(|s| s * s / energy).collect();
    let pc1_blueprint =
        Tensor::from_vec(&[k, k], (0..kk).map(|i| svd.v.get(&[i, 0])).collect()).unwrap();
    let scores: Vec<f64> = (0..m).map(|row| svd.u.get(&[row, 0]) * svd.sigma[0]).collect();
    Ok(PcaOutcome::Spectrum(FilterPcaResult {
        explained_ratios,
        total_variance,
        pc1_blueprint,
        scores,
        mean,
    }))
}

/// Histogram of PC1 explained-variance ratios over one group of filters.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceHistogram {
    pub group: String,
    /// `bins + 1` uniform edges spanning `[0, 1]`.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Filters excluded because their depth-axis variance was below
    /// [`DEGENERATE_VARIANCE`]; reported separately so they cannot bias the
    /// histogram toward either end.
    pub degenerate_count: usize,
}

impl VarianceHistogram {
    fn new(group: &str, bins: usize) -> Self {
        VarianceHistogram {
            group: group.to_string(),
            bin_edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
            counts: vec![0; bins],
            degenerate_count: 0,
        }
    }

    /// Analyzed filters including degenerate ones.
    pub fn total_filters(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.degenerate_count
    }
}

/// Per-filter centered PCA over a `[N, M, K, K]` kernel stack, aggregated
/// into one PC1-ratio histogram per group label (labels given per filter,
/// output ordered by first appearance).
pub fn analyze_kernel_set<S: Scalar>(
    kernels: &Tensor<S>,
    groups: &[String],
    bins: usize,
) -> Result<Vec<VarianceHistogram>, AnalysisError> {
    if kernels.ndim() != 4 {
        return Err(ShapeError::RankExpected {
            expected: 4,
            got: kernels.ndim(),
        }
        .into());
    }
    let n = kernels.extent(0);
    if groups.len() != n {
        return Err(AnalysisError::GroupCount {
            expected: n,
            got: groups.len(),
        });
    }
    if bins == 0 {
        return Err(AnalysisError::NoBins);
    }
    let m = kernels.extent(1);
    let k = kernels.extent(2);
    let filter_len = m * k * k;

    let mut order: Vec<String> = Vec::new();
    let mut hists: Vec<VarianceHistogram> = Vec::new();
    for (fi, label) in groups.iter().enumerate() {
        let slot = match order.iter().position(|g| g == label) {
            Some(i) => i,
            None => {
                order.push(label.clone());
                hists.push(VarianceHistogram::new(label, bins));
                order.len() - 1
            }
        };
        let filter = Tensor::from_vec(
            &[m, k, k],
            kernels.data()[fi * filter_len..(fi + 1) * filter_len].to_vec(),
        )?;
        match pca_filter(&filter, true)? {
            PcaOutcome::Spectrum(res) => {
                let ratio = res.explained_ratios[0].clamp(0.0, 1.0);
                let bin = ((ratio * bins as f64) as usize).min(bins - 1);
                hists[slot].counts[bin] += 1;
            }
            PcaOutcome::Degenerate { .. } => hists[slot].degenerate_count += 1,
        }
    }
    Ok(hists)
}
