//! Pixel cross-entropy, center pooling and the center-collapse loss.
//!
//! The center branch pools the features of each class present in a batch
//! into one center and scores every center with cross-entropy against a
//! classifier (normally a fixed simplex ETF). The loss is summed over the
//! present centers, so each class contributes equally no matter how many
//! pixels it covers. The pixel branch is a plain mean cross-entropy.
//!
//! Classifiers are `d x K` with one column per class. Features are `N x d`
//! with one row per sample.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::etf::EtfFrame;
use crate::metrics::FeatureBatch;

/// One center per class present in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBatch {
    /// `m x d`, row `j` is the mean feature of class `classes[j]`.
    pub centers: DMatrix<f64>,
    /// Present classes in ascending order.
    pub classes: Vec<usize>,
    /// Sample count of each present class.
    pub counts: Vec<usize>,
    /// For every input row, the index into `classes` of its center.
    pub source_map: Vec<usize>,
    /// Total number of classes.
    pub num_classes: usize,
}

impl CenterBatch {
    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub pr_loss: f64,
    pub cr_loss: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Mean feature per present class, accumulated in ascending row order.
pub fn center_pool(batch: &FeatureBatch) -> CenterBatch {
    let k = batch.classes();
    let d = batch.dim();
    let z = batch.features();
    let mut counts_all = vec![0usize; k];
    for &l in batch.labels() {
        counts_all[l] += 1;
    }
    let classes: Vec<usize> = (0..k).filter(|&c| counts_all[c] > 0).collect();
    let mut slot = vec![usize::MAX; k];
    for (j, &c) in classes.iter().enumerate() {
        slot[c] = j;
    }
    let mut centers = DMatrix::<f64>::zeros(classes.len(), d);
    let mut source_map = Vec::with_capacity(batch.len());
    for (i, &l) in batch.labels().iter().enumerate() {
        let j = slot[l];
        source_map.push(j);
        for c in 0..d {
            centers[(j, c)] += z[(i, c)];
        }
    }
    let counts: Vec<usize> = classes.iter().map(|&c| counts_all[c]).collect();
    for (j, &n) in counts.iter().enumerate() {
        let mut row = centers.row_mut(j);
        row /= n as f64;
    }
    CenterBatch {
        centers,
        classes,
        counts,
        source_map,
        num_classes: k,
    }
}

/// Softmax with max-logit subtraction, in place.
fn softmax_in_place(logits: &mut [f64]) -> Result<()> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// `p_k(z) = exp(z.w_k) / sum_k' exp(z.w_k')`.
pub fn softmax_probs(z: &DVector<f64>, w: &DMatrix<f64>) -> Result<DVector<f64>> {
    if z.len() != w.nrows() {
        return Err(Error::dim(format!(
            "feature has dimension {}, classifier has {}",
            z.len(),
            w.nrows()
        )));
    }
    let mut logits: Vec<f64> = w.column_iter().map(|c| c.dot(z)).collect();
    softmax_in_place(&mut logits)?;
    Ok(DVector::from_vec(logits))
}

fn check_center_shapes(cb: &CenterBatch, w: &DMatrix<f64>) -> Result<()> {
    if cb.dim() != w.nrows() {
        return Err(Error::dim(format!(
            "centers have dimension {}, classifier has {}",
            cb.dim(),
            w.nrows()
        )));
    }
    if let Some(&c) = cb.classes.iter().find(|&&c| c >= w.ncols()) {
        return Err(Error::dim(format!(
            "center class {c} has no classifier column (K = {})",
            w.ncols()
        )));
    }
    Ok(())
}

/// `m x K` softmax probabilities of every center against `w`.
fn center_probs(cb: &CenterBatch, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut p = &cb.centers * w;
    for j in 0..p.nrows() {
        let mut row: Vec<f64> = p.row(j).iter().copied().collect();
        softmax_in_place(&mut row)?;
        for (c, v) in row.into_iter().enumerate() {
            p[(j, c)] = v;
        }
    }
    Ok(p)
}

/// Cross-entropy of each center against its own class, summed over the
/// present centers, for an arbitrary `d x K` center classifier.
pub fn cr_loss_with(cb: &CenterBatch, w: &DMatrix<f64>) -> Result<f64> {
    check_center_shapes(cb, w)?;
    let logits = &cb.centers * w;
    let mut total = 0.0;
    for (j, &c) in cb.classes.iter().enumerate() {
        let row = logits.row(j);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite center logit".into()));
        }
        let max = row.max();
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[c];
    }
    Ok(total)
}

pub fn cr_loss(cb: &CenterBatch, frame: &EtfFrame) -> Result<f64> {
    cr_loss_with(cb, frame.matrix())
}

/// Gradient of the center loss w.r.t. the center classifier.
///
/// Column `k` is `(p_k(c_k) - 1) c_k + sum_{j != k} p_k(c_j) c_j`: a pull
/// toward the own-class center and a push away from every other center.
pub fn cr_grad_classifier(cb: &CenterBatch, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_center_shapes(cb, w)?;
    let mut coef = center_probs(cb, w)?;
    for (j, &c) in cb.classes.iter().enumerate() {
        coef[(j, c)] -= 1.0;
    }
    Ok(cb.centers.transpose() * coef)
}

/// Gradient of the center loss w.r.t. each center, `m x d`:
/// `sum_k' p_k'(c) (w_k' - w_k)`.
fn cr_grad_centers(cb: &CenterBatch, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut coef = center_probs(cb, w)?;
    for (j, &c) in cb.classes.iter().enumerate() {
        coef[(j, c)] -= 1.0;
    }
    Ok(coef * w.transpose())
}

/// Per-row feature gradient of the center loss for an arbitrary classifier.
///
/// A row of class `k` receives `(1/n_k) sum_k' p_k'(c_k) (w_k' - w_k)`, the
/// center gradient spread evenly over the rows that formed the center.
pub fn cr_grad_features_with(cb: &CenterBatch, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_center_shapes(cb, w)?;
    let mut per_center = cr_grad_centers(cb, w)?;
    for (j, &n) in cb.counts.iter().enumerate() {
        let mut row = per_center.row_mut(j);
        row /= n as f64;
    }
    let d = cb.dim();
    let mut out = DMatrix::<f64>::zeros(cb.source_map.len(), d);
    for (i, &j) in cb.source_map.iter().enumerate() {
        out.row_mut(i).copy_from(&per_center.row(j));
    }
    Ok(out)
}

pub fn cr_grad_features(cb: &CenterBatch, frame: &EtfFrame) -> Result<DMatrix<f64>> {
    cr_grad_features_with(cb, frame.matrix())
}

/// Pixel-branch cross-entropy and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct PrOutput {
    pub loss: f64,
    /// `N x d`
    pub feature_grad: DMatrix<f64>,
    /// `d x K`
    pub classifier_grad: DMatrix<f64>,
}

/// Mean cross-entropy over all rows of `batch` with classifier `w_pr`.
pub fn pr_loss_and_grad(batch: &FeatureBatch, w_pr: &DMatrix<f64>) -> Result<PrOutput> {
    let z = batch.features();
    if z.ncols() != w_pr.nrows() {
        return Err(Error::dim(format!(
            "features have dimension {}, classifier has {}",
            z.ncols(),
            w_pr.nrows()
        )));
    }
    let k = w_pr.ncols();
    if let Some(&l) = batch.labels().iter().find(|&&l| l >= k) {
        return Err(Error::Domain(format!(
            "label {l} out of range for {k} classifier columns"
        )));
    }
    let n = batch.len();
    let mut g = z * w_pr;
    let mut loss = 0.0;
    let mut row = vec![0.0; k];
    for (i, &label) in batch.labels().iter().enumerate() {
        for (c, slot) in row.iter_mut().enumerate() {
            *slot = g[(i, c)];
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logit in row {i}")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += max + sum.ln() - row[label];
        for c in 0..k {
            let p = (row[c] - max).exp() / sum;
            let y = if c == label { 1.0 } else { 0.0 };
            g[(i, c)] = (p - y) / n as f64;
        }
    }
    Ok(PrOutput {
        loss: loss / n as f64,
        feature_grad: &g * w_pr.transpose(),
        classifier_grad: z.transpose() * &g,
    })
}

/// Both branches combined: `pr + lambda * cr`.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalOutput {
    pub breakdown: LossBreakdown,
    /// `grad_pr + lambda * grad_cr`, `N x d`.
    pub feature_grad: DMatrix<f64>,
    /// Gradient w.r.t. the pixel classifier (the center frame is fixed).
    pub classifier_grad: DMatrix<f64>,
}

pub fn total_loss(
    batch: &FeatureBatch,
    w_pr: &DMatrix<f64>,
    frame: &EtfFrame,
    lambda: f64,
) -> Result<TotalOutput> {
    total_loss_with(batch, w_pr, frame.matrix(), lambda)
}

/// [`total_loss`] with an arbitrary center classifier.
pub fn total_loss_with(
    batch: &FeatureBatch,
    w_pr: &DMatrix<f64>,
    w_center: &DMatrix<f64>,
    lambda: f64,
) -> Result<TotalOutput> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!(
            "lambda must be a nonnegative number, got {lambda}"
        )));
    }
    let pr = pr_loss_and_grad(batch, w_pr)?;
    let cb = center_pool(batch);
    let cr = cr_loss_with(&cb, w_center)?;
    let mut feature_grad = pr.feature_grad;
    if lambda != 0.0 {
        let g = cr_grad_features_with(&cb, w_center)?;
        feature_grad += g * lambda;
    }
    Ok(TotalOutput {
        breakdown: LossBreakdown {
            pr_loss: pr.loss,
            cr_loss: cr,
            total: pr.loss + lambda * cr,
            lambda,
        },
        feature_grad,
        classifier_grad: pr.classifier_grad,
    })
}
