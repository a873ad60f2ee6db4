//! Neural-collapse statistics and imbalance diagnostics.
//!
//! Class indices are 0-based throughout the library. Text formats and the
//! JSON report use 1-based labels.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::etf::normalized_columns;

/// Tolerance on row norms accepted by the cosine statistics.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Default exclusion threshold for [`centered_normalized_means`].
pub const DEFAULT_CENTER_EPS: f64 = 1e-12;

/// `N x d` features with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    features: DMatrix<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl FeatureBatch {
    pub fn new(features: DMatrix<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::dim("feature batch needs N >= 1 and d >= 1"));
        }
        if labels.len() != features.nrows() {
            return Err(Error::dim(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.nrows()
            )));
        }
        if let Some((row, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Domain(format!(
                "label {l} at row {row} is outside 0..{classes}"
            )));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Per-class counts and means plus the global mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub counts: Vec<usize>,
    /// `K x d`; rows of absent classes are zero.
    pub class_means: DMatrix<f64>,
    pub global_mean: DVector<f64>,
    pub present: Vec<bool>,
}

/// Accumulates rows in ascending row order, so results are bit-identical
/// for a given batch.
pub fn class_stats(batch: &FeatureBatch) -> ClassStats {
    let k = batch.classes();
    let d = batch.dim();
    let z = batch.features();
    let mut counts = vec![0usize; k];
    let mut sums = DMatrix::<f64>::zeros(k, d);
    let mut total = DVector::<f64>::zeros(d);
    for (i, &label) in batch.labels().iter().enumerate() {
        counts[label] += 1;
        for j in 0..d {
            sums[(label, j)] += z[(i, j)];
            total[j] += z[(i, j)];
        }
    }
    let present: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            let mut row = sums.row_mut(c);
            row /= n as f64;
        }
    }
    ClassStats {
        counts,
        class_means: sums,
        global_mean: total / batch.len() as f64,
        present,
    }
}

/// Unit rows `(mean_k - global_mean) / ‖…‖` for the usable present classes.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredMeans {
    /// `m x d`, one unit row per entry of `classes`.
    pub rows: DMatrix<f64>,
    pub classes: Vec<usize>,
    /// Present classes whose mean sits within `eps` of the global mean.
    pub excluded: Vec<usize>,
}

pub fn centered_normalized_means(stats: &ClassStats, eps: f64) -> Result<CenteredMeans> {
    let d = stats.global_mean.len();
    let mut classes = Vec::new();
    let mut excluded = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for (c, &present) in stats.present.iter().enumerate() {
        if !present {
            continue;
        }
        let diff = stats.class_means.row(c).transpose() - &stats.global_mean;
        let n = diff.norm();
        if n < eps {
            excluded.push(c);
            continue;
        }
        classes.push(c);
        rows.extend((diff / n).iter());
    }
    if classes.len() < 2 {
        return Err(Error::InsufficientClasses {
            usable: classes.len(),
            excluded,
        });
    }
    Ok(CenteredMeans {
        rows: DMatrix::from_row_slice(classes.len(), d, &rows),
        classes,
        excluded,
    })
}

fn check_unit_rows(v: &DMatrix<f64>) -> Result<()> {
    if v.nrows() < 2 {
        return Err(Error::InsufficientClasses {
            usable: v.nrows(),
            excluded: vec![],
        });
    }
    for (index, row) in v.row_iter().enumerate() {
        let norm = row.norm();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Normalization { index, norm });
        }
    }
    Ok(())
}

/// Cosines of all unordered pairs of distinct rows.
fn pair_cosines(v: &DMatrix<f64>) -> Vec<f64> {
    let g = v * v.transpose();
    let m = v.nrows();
    let mut out = Vec::with_capacity(m * (m - 1) / 2);
    for a in 0..m {
        for b in (a + 1)..m {
            out.push(g[(a, b)]);
        }
    }
    out
}

/// Population standard deviation of the pairwise cosines of unit rows.
pub fn equiangularity_std(v: &DMatrix<f64>) -> Result<f64> {
    check_unit_rows(v)?;
    let cos = pair_cosines(v);
    let n = cos.len() as f64;
    let mean = cos.iter().sum::<f64>() / n;
    let var = cos.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// Mean of `|cos + 1/(m-1)|` over pairs, `m` being the number of rows.
pub fn max_angle_deviation(v: &DMatrix<f64>) -> Result<f64> {
    check_unit_rows(v)?;
    let shift = 1.0 / (v.nrows() as f64 - 1.0);
    let cos = pair_cosines(v);
    Ok(cos.iter().map(|c| (c + shift).abs()).sum::<f64>() / cos.len() as f64)
}

/// Average of `1 - cos(w_k, zhat_k)` over the classes in `zhat`.
pub fn self_duality_gap(w: &DMatrix<f64>, zhat: &CenteredMeans) -> Result<f64> {
    if w.nrows() != zhat.rows.ncols() {
        return Err(Error::dim(format!(
            "classifier has dimension {}, centers have {}",
            w.nrows(),
            zhat.rows.ncols()
        )));
    }
    let mut total = 0.0;
    for (r, &c) in zhat.classes.iter().enumerate() {
        if c >= w.ncols() {
            return Err(Error::dim(format!(
                "class {c} has no classifier column (K = {})",
                w.ncols()
            )));
        }
        let col = w.column(c);
        let n = col.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateColumn { index: c });
        }
        let cos = zhat.rows.row(r).transpose().dot(&col) / n;
        total += 1.0 - cos;
    }
    Ok(total / zhat.classes.len() as f64)
}

/// `n_max / n_min` over strictly positive counts.
pub fn imbalance_factor(counts: &[usize]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::Domain("imbalance factor of no classes".into()));
    }
    if let Some(index) = counts.iter().position(|&c| c == 0) {
        return Err(Error::ExcludedClass { index });
    }
    let max = *counts.iter().max().unwrap();
    let min = *counts.iter().min().unwrap();
    Ok(max as f64 / min as f64)
}

/// Pearson correlation coefficient with population moments.
pub fn pearson(a: &[f64], f: &[f64]) -> Result<f64> {
    if a.len() != f.len() {
        return Err(Error::dim(format!("lengths {} and {}", a.len(), f.len())));
    }
    if a.len() < 2 {
        return Err(Error::Domain("correlation needs at least two points".into()));
    }
    fn centered(x: &[f64], which: &'static str) -> Result<Vec<f64>> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let scale = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let dev: Vec<f64> = x.iter().map(|v| v - mean).collect();
        let sd = (dev.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        // constant inputs leave only round-off in the deviations
        if sd <= 8.0 * f64::EPSILON * scale || sd == 0.0 {
            return Err(Error::UndefinedCorrelation { which });
        }
        Ok(dev)
    }
    let da = centered(a, "a")?;
    let df = centered(f, "f")?;
    let cov: f64 = da.iter().zip(&df).map(|(x, y)| x * y).sum();
    let va: f64 = da.iter().map(|x| x * x).sum();
    let vf: f64 = df.iter().map(|x| x * x).sum();
    Ok((cov / (va.sqrt() * vf.sqrt())).clamp(-1.0, 1.0))
}

/// Frequency bands; each list holds 0-based class indices in descending
/// frequency order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencySplit {
    pub head: Vec<usize>,
    pub common: Vec<usize>,
    pub tail: Vec<usize>,
}

/// Sorts classes by descending count (ties by ascending index) and cuts them
/// into head / common / tail. The outer bands get `floor(K/3)` classes each
/// and the middle band takes the rest, so `K = 200` splits as 66/68/66.
pub fn head_common_tail_split(counts: &[usize]) -> Result<FrequencySplit> {
    let k = counts.len();
    if k < 3 {
        return Err(Error::Split(k));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let outer = k / 3;
    let tail = order.split_off(k - outer);
    let common = order.split_off(outer);
    Ok(FrequencySplit {
        head: order,
        common,
        tail,
    })
}

/// Flat summary of the neural-collapse statistics for one set of features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcReport {
    pub equiang_std_centers: f64,
    pub maxangle_avg_centers: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equiang_std_classifier: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maxangle_avg_classifier: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_duality_gap: Option<f64>,
    pub n_classes_used: usize,
    /// 1-based labels of classes dropped because their mean equals the
    /// global mean.
    pub excluded_classes: Vec<usize>,
}

/// Computes the center statistics and, when a `d x K` classifier is given,
/// the classifier statistics and self-duality gap.
pub fn nc_report(batch: &FeatureBatch, classifier: Option<&DMatrix<f64>>) -> Result<NcReport> {
    let stats = class_stats(batch);
    let zhat = centered_normalized_means(&stats, DEFAULT_CENTER_EPS)?;
    let equiang_std_centers = equiangularity_std(&zhat.rows)?;
    let maxangle_avg_centers = max_angle_deviation(&zhat.rows)?;
    let (std_w, avg_w, gap) = match classifier {
        Some(w) => {
            if w.ncols() != batch.classes() || w.nrows() != batch.dim() {
                return Err(Error::dim(format!(
                    "classifier is {}x{}, features need {}x{}",
                    w.nrows(),
                    w.ncols(),
                    batch.dim(),
                    batch.classes()
                )));
            }
            let wn = normalized_columns(w)?.transpose();
            (
                Some(equiangularity_std(&wn)?),
                Some(max_angle_deviation(&wn)?),
                Some(self_duality_gap(w, &zhat)?),
            )
        }
        None => (None, None, None),
    };
    Ok(NcReport {
        equiang_std_centers,
        maxangle_avg_centers,
        equiang_std_classifier: std_w,
        maxangle_avg_classifier: avg_w,
        self_duality_gap: gap,
        n_classes_used: zhat.classes.len(),
        excluded_classes: zhat.excluded.iter().map(|c| c + 1).collect(),
    })
}
