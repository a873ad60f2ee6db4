//! Simplex equiangular tight frames.
//!
//! A simplex ETF of `K` vectors in `R^d` is built as
//! `alpha * sqrt(K/(K-1)) * U * (I_K - 1_K 1_K^T / K)` where `U` is a `d x K`
//! matrix with orthonormal columns. Every column then has norm `alpha` and
//! every pair of columns has cosine `-1/(K-1)`, the most negative common value
//! `K` unit vectors can share.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};

/// Default tolerance for [`verify_etf`].
pub const DEFAULT_VERIFY_TOL: f64 = 1e-8;

/// `d x K` matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalBasis {
    columns: DMatrix<f64>,
}

impl OrthonormalBasis {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.columns
    }

    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn classes(&self) -> usize {
        self.columns.ncols()
    }
}

/// A scaled simplex ETF, used as a fixed classifier. Column `k` is the
/// classifier vector of class `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtfFrame {
    matrix: DMatrix<f64>,
    alpha: f64,
}

impl EtfFrame {
    /// Wraps an existing matrix without checking the ETF property; used when
    /// reading frames back from disk. Call [`verify_etf`] to check it.
    pub fn from_parts(matrix: DMatrix<f64>, alpha: f64) -> Self {
        Self { matrix, alpha }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn classes(&self) -> usize {
        self.matrix.ncols()
    }

    /// Largest deviation over `k != k'` of `||w_k - w_k'||^2` from the
    /// simplex value `alpha^2 * 2K/(K-1)`.
    pub fn max_pair_sqdist_deviation(&self) -> f64 {
        let k = self.classes();
        let target = self.alpha * self.alpha * 2.0 * k as f64 / (k as f64 - 1.0);
        let mut worst = 0.0_f64;
        for a in 0..k {
            for b in (a + 1)..k {
                let sq = (self.matrix.column(a) - self.matrix.column(b)).norm_squared();
                worst = worst.max((sq - target).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EtfCheckReport {
    /// Worst `|‖w_k‖ - mean norm| / mean norm`.
    pub max_norm_deviation: f64,
    /// Worst `|cos(w_k, w_k') + 1/(K-1)|` over `k != k'`.
    pub max_offdiag_deviation: f64,
    pub max_pairwise_cosine: f64,
    pub is_etf: bool,
}

/// Seeded `d x K` matrix with orthonormal columns.
///
/// A standard Gaussian matrix is orthonormalized by Gram-Schmidt with a
/// second full re-orthogonalization pass per column, which keeps
/// `U^T U = I` at round-off level even for nearly dependent draws.
pub fn make_rotation(d: usize, k: usize, seed: u64) -> Result<OrthonormalBasis> {
    if d < k {
        return Err(Error::dim(format!(
            "rotation needs d >= K, got d = {d}, K = {k}"
        )));
    }
    if k == 0 {
        return Err(Error::dim("rotation needs K >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = DMatrix::<f64>::zeros(d, k);
    let mut j = 0;
    while j < k {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let raw_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for _pass in 0..2 {
            for p in 0..j {
                let col = q.column(p);
                let proj: f64 = col.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (vi, ci) in v.iter_mut().zip(col.iter()) {
                    *vi -= proj * ci;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // reject draws that were (numerically) inside the span so far
        if norm <= 1e-8 * raw_norm || norm == 0.0 {
            continue;
        }
        for (i, vi) in v.iter().enumerate() {
            q[(i, j)] = vi / norm;
        }
        j += 1;
    }
    Ok(OrthonormalBasis { columns: q })
}

/// Builds `alpha * sqrt(K/(K-1)) * U * (I - 11^T/K)` with `U` from
/// [`make_rotation`].
pub fn make_etf(d: usize, k: usize, alpha: f64, seed: u64) -> Result<EtfFrame> {
    if k < 2 {
        return Err(Error::Domain(format!(
            "a simplex ETF needs K >= 2, got K = {k}"
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    let u = make_rotation(d, k, seed)?.into_matrix();
    let kf = k as f64;
    let centering = DMatrix::<f64>::from_fn(k, k, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - 1.0 / kf
    });
    let scale = alpha * (kf / (kf - 1.0)).sqrt();
    let matrix = (u * centering) * scale;
    Ok(EtfFrame { matrix, alpha })
}

/// Columns rescaled to unit norm.
pub fn normalized_columns(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = w.clone();
    for (index, mut col) in out.column_iter_mut().enumerate() {
        let n = col.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateColumn { index });
        }
        col /= n;
    }
    Ok(out)
}

/// Largest cosine between two distinct columns. For `K` unit vectors this is
/// never below `-1/(K-1)`, with equality exactly for a simplex ETF.
pub fn max_pairwise_cosine(w: &DMatrix<f64>) -> Result<f64> {
    let k = w.ncols();
    if k < 2 {
        return Err(Error::Domain("need at least two columns".into()));
    }
    let n = normalized_columns(w)?;
    let gram = n.transpose() * &n;
    let mut best = f64::NEG_INFINITY;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                best = best.max(gram[(a, b)]);
            }
        }
    }
    Ok(best)
}

/// Checks equal column norms and common pairwise cosine `-1/(K-1)`.
pub fn verify_etf(w: &DMatrix<f64>, tol: f64) -> Result<EtfCheckReport> {
    let k = w.ncols();
    if k < 2 {
        return Err(Error::Domain(format!(
            "verification needs K >= 2, got K = {k}"
        )));
    }
    let norms: Vec<f64> = w.column_iter().map(|c| c.norm()).collect();
    if let Some(index) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::DegenerateColumn { index });
    }
    let mean_norm = norms.iter().sum::<f64>() / k as f64;
    let max_norm_deviation = norms
        .iter()
        .map(|n| (n - mean_norm).abs() / mean_norm)
        .fold(0.0, f64::max);

    let n = normalized_columns(w)?;
    let gram = n.transpose() * &n;
    let target = -1.0 / (k as f64 - 1.0);
    let mut max_offdiag_deviation = 0.0_f64;
    let mut max_cos = f64::NEG_INFINITY;
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            let c = gram[(a, b)];
            max_cos = max_cos.max(c);
            max_offdiag_deviation = max_offdiag_deviation.max((c - target).abs());
        }
    }
    Ok(EtfCheckReport {
        max_norm_deviation,
        max_offdiag_deviation,
        max_pairwise_cosine: max_cos,
        is_etf: max_norm_deviation <= tol && max_offdiag_deviation <= tol,
    })
}
