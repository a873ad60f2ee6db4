//! Scalar reference implementations written with plain loops. Nothing here
//! calls library loss, metric or network code.

use ceco_core::toy::MlpParams;
use nalgebra::DMatrix;

/// `-log softmax(logits)[target]`, stable.
pub fn ce(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    m + s.ln() - logits[target]
}

fn logits_of(z: &[f64], w: &DMatrix<f64>) -> Vec<f64> {
    (0..w.ncols())
        .map(|k| (0..z.len()).map(|i| z[i] * w[(i, k)]).sum())
        .collect()
}

/// Sum over present classes of the cross-entropy of the class mean.
pub fn center_loss(z: &DMatrix<f64>, labels: &[usize], w: &DMatrix<f64>) -> f64 {
    let (n, d) = z.shape();
    let mut total = 0.0;
    for c in 0..w.ncols() {
        let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if rows.is_empty() {
            continue;
        }
        let mean: Vec<f64> = (0..d)
            .map(|j| rows.iter().map(|&i| z[(i, j)]).sum::<f64>() / rows.len() as f64)
            .collect();
        total += ce(&logits_of(&mean, w), c);
    }
    total
}

/// Mean per-row cross-entropy.
pub fn pixel_loss(z: &DMatrix<f64>, labels: &[usize], w: &DMatrix<f64>) -> f64 {
    let n = z.nrows();
    let sum: f64 = (0..n)
        .map(|i| {
            let row: Vec<f64> = z.row(i).iter().cloned().collect();
            ce(&logits_of(&row, w), labels[i])
        })
        .sum();
    sum / n as f64
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// The feature network written out entry by entry.
pub fn features(p: &MlpParams, x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, s) = x.shape();
    let (h, d) = (p.w1.ncols(), p.w2.ncols());
    DMatrix::from_fn(n, d, |i, j| {
        let mut acc = p.b2[j];
        for u in 0..h {
            let mut pre = p.b1[u];
            for v in 0..s {
                pre += x[(i, v)] * p.w1[(v, u)];
            }
            acc += elu(pre) * p.w2[(u, j)];
        }
        acc
    })
}

pub fn objective(p: &MlpParams, x: &DMatrix<f64>, y: &[usize], frame: &DMatrix<f64>, lambda: f64) -> f64 {
    let z = features(p, x);
    pixel_loss(&z, y, &p.w_pr) + lambda * center_loss(&z, y, frame)
}

/// Central differences of `f` at every entry of `x`.
pub fn fd(x: &DMatrix<f64>, h: f64, f: impl Fn(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(x.nrows(), x.ncols());
    let mut y = x.clone();
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let v = x[(i, j)];
            y[(i, j)] = v + h;
            let up = f(&y);
            y[(i, j)] = v - h;
            let down = f(&y);
            y[(i, j)] = v;
            g[(i, j)] = (up - down) / (2.0 * h);
        }
    }
    g
}

/// `max |a - n| / max(|a|_inf, |n|_inf)`; infinite if anything is not finite.
pub fn rel(a: &DMatrix<f64>, n: &DMatrix<f64>) -> f64 {
    if a.iter().chain(n.iter()).any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    (a - n).amax() / a.amax().max(n.amax()).max(1e-12)
}

/// Largest pairwise cosine by a plain double loop.
pub fn max_cos(w: &DMatrix<f64>) -> f64 {
    let k = w.ncols();
    let mut m = f64::NEG_INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            let c = w.column(i).dot(&w.column(j)) / (w.column(i).norm() * w.column(j).norm());
            m = m.max(c);
        }
    }
    m
}

/// Largest deviation of column norms from `alpha` and of pairwise cosines
/// from `-1/(K-1)`.
pub fn etf_deviation(w: &DMatrix<f64>, alpha: f64) -> (f64, f64) {
    let k = w.ncols();
    let target = -1.0 / (k as f64 - 1.0);
    let norms: Vec<f64> = w.column_iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let norm_dev = norms.iter().map(|n| (n - alpha).abs()).fold(0.0, f64::max);
    let mut cos_dev: f64 = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let dot: f64 = (0..w.nrows()).map(|r| w[(r, i)] * w[(r, j)]).sum();
            cos_dev = cos_dev.max((dot / (norms[i] * norms[j]) - target).abs());
        }
    }
    (norm_dev, cos_dev)
}

/// Largest `| ‖w_i - w_j‖^2 - alpha^2 2K/(K-1) |`.
pub fn sqdist_deviation(w: &DMatrix<f64>, alpha: f64) -> f64 {
    let k = w.ncols();
    let target = alpha * alpha * 2.0 * k as f64 / (k as f64 - 1.0);
    let mut dev: f64 = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let d2: f64 = (0..w.nrows()).map(|r| (w[(r, i)] - w[(r, j)]).powi(2)).sum();
            dev = dev.max((d2 - target).abs());
        }
    }
    dev
}
