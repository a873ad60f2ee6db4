//! Two-layer perceptron feature extractor with hand-written backprop.
//!
//! `Z = elu(X W1 + b1) W2 + b2`, `logits = Z W_pr`. ELU is the identity on
//! nonnegative inputs and has a continuous derivative, which keeps finite
//! difference checks clean near the kink.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    /// `s x h`
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// `h x d`
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    /// Pixel classifier, `d x K`.
    pub w_pr: DMatrix<f64>,
}

/// Gradients with the same layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w_pr: DMatrix<f64>,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let e: f64 = StandardNormal.sample(rng);
        std * e
    })
}

impl MlpParams {
    /// He-scaled Gaussian weights, zero biases.
    pub fn init(s: usize, h: usize, d: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w1: gaussian(s, h, (2.0 / s as f64).sqrt(), &mut rng),
            b1: DVector::zeros(h),
            w2: gaussian(h, d, (1.0 / h as f64).sqrt(), &mut rng),
            b2: DVector::zeros(d),
            w_pr: gaussian(d, k, (1.0 / d as f64).sqrt(), &mut rng),
        }
    }

    pub fn zeros(s: usize, h: usize, d: usize, k: usize) -> Self {
        Self {
            w1: DMatrix::zeros(s, h),
            b1: DVector::zeros(h),
            w2: DMatrix::zeros(h, d),
            b2: DVector::zeros(d),
            w_pr: DMatrix::zeros(d, k),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn classes(&self) -> usize {
        self.w_pr.ncols()
    }

    fn check_shapes(&self) -> Result<()> {
        let (s, h, d, k) = (
            self.input_dim(),
            self.hidden_dim(),
            self.feature_dim(),
            self.classes(),
        );
        if self.b1.len() != h
            || self.w2.nrows() != h
            || self.b2.len() != d
            || self.w_pr.nrows() != d
            || s == 0
            || k == 0
        {
            return Err(Error::dim("inconsistent MLP parameter shapes"));
        }
        Ok(())
    }

    /// Hash of every parameter bit pattern; ties a forward cache to the
    /// parameters that produced it.
    pub fn fingerprint(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let blocks: [&[f64]; 5] = [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.w_pr.as_slice(),
        ];
        for block in blocks {
            hash = (hash ^ block.len() as u64).wrapping_mul(0x0000_0100_0000_01b3);
            for v in block {
                hash = (hash ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        hash
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Activations kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: DMatrix<f64>,
    pre_hidden: DMatrix<f64>,
    hidden: DMatrix<f64>,
    fingerprint: u64,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `N x d`
    pub features: DMatrix<f64>,
    /// `N x K`
    pub logits: DMatrix<f64>,
    pub cache: ForwardCache,
}

fn add_row_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col.add_scalar_mut(b[j]);
    }
}

fn features_of(params: &MlpParams, inputs: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut pre = inputs * &params.w1;
    add_row_bias(&mut pre, &params.b1);
    let hidden = pre.map(elu);
    let mut z = &hidden * &params.w2;
    add_row_bias(&mut z, &params.b2);
    (pre, hidden, z)
}

fn check_inputs(params: &MlpParams, inputs: &DMatrix<f64>) -> Result<()> {
    params.check_shapes()?;
    if inputs.ncols() != params.input_dim() {
        return Err(Error::dim(format!(
            "inputs have {} columns, network expects {}",
            inputs.ncols(),
            params.input_dim()
        )));
    }
    Ok(())
}

pub fn forward(params: &MlpParams, inputs: &DMatrix<f64>) -> Result<ForwardPass> {
    check_inputs(params, inputs)?;
    let (pre_hidden, hidden, features) = features_of(params, inputs);
    let logits = &features * &params.w_pr;
    Ok(ForwardPass {
        features,
        logits,
        cache: ForwardCache {
            inputs: inputs.clone(),
            pre_hidden,
            hidden,
            fingerprint: params.fingerprint(),
        },
    })
}

/// Argmax of the pixel logits. Needs nothing beyond the network itself.
pub fn predict(params: &MlpParams, inputs: &DMatrix<f64>) -> Result<Vec<usize>> {
    check_inputs(params, inputs)?;
    let (_, _, z) = features_of(params, inputs);
    let logits = z * &params.w_pr;
    Ok(logits
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Chain rule from `dL/dZ` (`N x d`) down to every layer; the pixel
/// classifier gradient is passed through unchanged.
pub fn backward(
    params: &MlpParams,
    cache: &ForwardCache,
    feature_grads: &DMatrix<f64>,
    classifier_grads: &DMatrix<f64>,
) -> Result<MlpGrads> {
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::StaleCache);
    }
    if feature_grads.shape() != (cache.inputs.nrows(), params.feature_dim()) {
        return Err(Error::dim(format!(
            "feature gradient is {:?}, expected {:?}",
            feature_grads.shape(),
            (cache.inputs.nrows(), params.feature_dim())
        )));
    }
    if classifier_grads.shape() != params.w_pr.shape() {
        return Err(Error::dim("classifier gradient shape mismatch"));
    }
    let w2 = cache.hidden.transpose() * feature_grads;
    let b2 = feature_grads.row_sum().transpose();
    let mut d_pre = feature_grads * params.w2.transpose();
    d_pre.zip_apply(&cache.pre_hidden, |g, x| *g *= elu_grad(x));
    let w1 = cache.inputs.transpose() * &d_pre;
    let b1 = d_pre.row_sum().transpose();
    Ok(MlpGrads {
        w1,
        b1,
        w2,
        b2,
        w_pr: classifier_grads.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Leave the pixel classifier untouched (fixed-classifier variants).
    pub freeze_classifier: bool,
}

/// `p <- p - lr * (grad + weight_decay * p)` over flat parameter storage.
pub fn sgd_update(p: &mut [f64], g: &[f64], lr: f64, wd: f64) {
    for (pv, gv) in p.iter_mut().zip(g) {
        *pv -= lr * (gv + wd * *pv);
    }
}

fn all_finite(grads: &MlpGrads) -> bool {
    [
        grads.w1.as_slice(),
        grads.b1.as_slice(),
        grads.w2.as_slice(),
        grads.b2.as_slice(),
        grads.w_pr.as_slice(),
    ]
    .iter()
    .all(|b| b.iter().all(|v| v.is_finite()))
}

pub fn sgd_step(params: &mut MlpParams, grads: &MlpGrads, cfg: SgdConfig) -> Result<()> {
    if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(Error::Domain(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if !(cfg.weight_decay >= 0.0) {
        return Err(Error::Domain(format!(
            "weight decay must be nonnegative, got {}",
            cfg.weight_decay
        )));
    }
    if !all_finite(grads) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let (lr, wd) = (cfg.lr, cfg.weight_decay);
    sgd_update(params.w1.as_mut_slice(), grads.w1.as_slice(), lr, wd);
    sgd_update(params.b1.as_mut_slice(), grads.b1.as_slice(), lr, wd);
    sgd_update(params.w2.as_mut_slice(), grads.w2.as_slice(), lr, wd);
    sgd_update(params.b2.as_mut_slice(), grads.b2.as_slice(), lr, wd);
    if !cfg.freeze_classifier {
        sgd_update(params.w_pr.as_mut_slice(), grads.w_pr.as_slice(), lr, wd);
    }
    Ok(())
}
