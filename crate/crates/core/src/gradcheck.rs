//! Central finite-difference checks for every hand-written gradient.
//!
//! Each suite draws `trials` random instances. Instance `i` of a run with
//! seed `s` uses seed `s + i`, so a failing instance can be replayed alone
//! with `trials = 1`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::etf::make_etf;
use crate::loss::{
    center_pool, cr_grad_classifier, cr_grad_features_with, cr_loss_with, pr_loss_and_grad,
    total_loss_with,
};
use crate::metrics::FeatureBatch;
use crate::toy::mlp::{backward, forward, MlpParams};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-6;
/// Lambdas used by the end-to-end suite, picked by `instance seed % 3`.
pub const E2E_LAMBDAS: [f64; 3] = [0.0, 0.4, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Center loss w.r.t. the center classifier.
    CenterClassifier,
    /// Center loss w.r.t. the pixel features, through the pooling.
    CenterFeatures,
    /// Pixel cross-entropy w.r.t. features and pixel classifier.
    PixelCe,
    /// Total loss w.r.t. every network parameter.
    EndToEnd,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::CenterClassifier,
        Suite::CenterFeatures,
        Suite::PixelCe,
        Suite::EndToEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::CenterClassifier => "center_classifier",
            Suite::CenterFeatures => "center_features",
            Suite::PixelCe => "pixel_ce",
            Suite::EndToEnd => "end_to_end",
        }
    }
}

/// Deliberate bug for checking that the checker can fail.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Negate the center-loss feature gradient.
    FlipFeatureGrad,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: Suite,
    pub trials: usize,
    pub worst_error: f64,
    /// Seed of the instance that produced `worst_error`.
    pub worst_seed: u64,
    pub passed: bool,
}

/// `max |a - n| / max(|a|_inf, |n|_inf)`, with a tiny floor on the
/// denominator so an all-zero pair scores 0.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    if analytic.iter().chain(numeric).any(|x| !x.is_finite()) {
        return f64::INFINITY;
    }
    let inf = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(1e-12)
}

/// Central differences of `f` w.r.t. every entry of `x`.
pub fn numeric_gradient<F>(x: &mut [f64], mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = f(x)?;
        x[i] = orig - FD_STEP;
        let down = f(x)?;
        x[i] = orig;
        g.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(g)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

struct Instance {
    features: DMatrix<f64>,
    labels: Vec<usize>,
    classes: usize,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let classes = rng.random_range(2..=5);
    let d = rng.random_range(classes..=classes + 3);
    let n = rng.random_range(classes..=14);
    let labels = (0..n)
        .map(|i| if i < 2 { i % classes } else { rng.random_range(0..classes) })
        .collect();
    Instance {
        features: gaussian(n, d, rng),
        labels,
        classes,
    }
}

fn batch_of(z: &DMatrix<f64>, inst: &Instance) -> Result<FeatureBatch> {
    FeatureBatch::new(z.clone(), inst.labels.clone(), inst.classes)
}

fn center_classifier_trial(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = random_instance(&mut rng);
    let d = inst.features.ncols();
    let w = gaussian(d, inst.classes, &mut rng);
    let cb = center_pool(&batch_of(&inst.features, &inst)?);
    let analytic = cr_grad_classifier(&cb, &w)?;
    let mut x = w.as_slice().to_vec();
    let numeric = numeric_gradient(&mut x, |v| {
        cr_loss_with(&cb, &DMatrix::from_column_slice(d, inst.classes, v))
    })?;
    Ok(relative_error(analytic.as_slice(), &numeric))
}

fn center_features_trial(seed: u64, fault: Fault) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = random_instance(&mut rng);
    let (n, d) = inst.features.shape();
    let alpha = rng.random_range(0.5..3.0);
    let frame = make_etf(d, inst.classes, alpha, rng.random())?;
    let w = frame.matrix();
    let mut analytic = cr_grad_features_with(&center_pool(&batch_of(&inst.features, &inst)?), w)?;
    if fault == Fault::FlipFeatureGrad {
        analytic = -analytic;
    }
    let mut x = inst.features.as_slice().to_vec();
    let numeric = numeric_gradient(&mut x, |v| {
        let z = DMatrix::from_column_slice(n, d, v);
        cr_loss_with(&center_pool(&batch_of(&z, &inst)?), w)
    })?;
    Ok(relative_error(analytic.as_slice(), &numeric))
}

fn pixel_ce_trial(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = random_instance(&mut rng);
    let (n, d) = inst.features.shape();
    let w = gaussian(d, inst.classes, &mut rng);
    let out = pr_loss_and_grad(&batch_of(&inst.features, &inst)?, &w)?;
    let mut analytic = out.feature_grad.as_slice().to_vec();
    analytic.extend_from_slice(out.classifier_grad.as_slice());
    let split = n * d;
    let mut x = inst.features.as_slice().to_vec();
    x.extend_from_slice(w.as_slice());
    let numeric = numeric_gradient(&mut x, |v| {
        let z = DMatrix::from_column_slice(n, d, &v[..split]);
        let w = DMatrix::from_column_slice(d, inst.classes, &v[split..]);
        Ok(pr_loss_and_grad(&batch_of(&z, &inst)?, &w)?.loss)
    })?;
    Ok(relative_error(&analytic, &numeric))
}

fn flatten(p: &MlpParams) -> Vec<f64> {
    let mut v = Vec::new();
    v.extend_from_slice(p.w1.as_slice());
    v.extend_from_slice(p.b1.as_slice());
    v.extend_from_slice(p.w2.as_slice());
    v.extend_from_slice(p.b2.as_slice());
    v.extend_from_slice(p.w_pr.as_slice());
    v
}

fn unflatten(v: &[f64], like: &MlpParams) -> MlpParams {
    let (s, h, d, k) = (
        like.input_dim(),
        like.hidden_dim(),
        like.feature_dim(),
        like.classes(),
    );
    let mut at = 0;
    let mut take = |len: usize| {
        let piece = &v[at..at + len];
        at += len;
        piece
    };
    MlpParams {
        w1: DMatrix::from_column_slice(s, h, take(s * h)),
        b1: DVector::from_column_slice(take(h)),
        w2: DMatrix::from_column_slice(h, d, take(h * d)),
        b2: DVector::from_column_slice(take(d)),
        w_pr: DMatrix::from_column_slice(d, k, take(d * k)),
    }
}

fn end_to_end_trial(seed: u64, lambda: f64, fault: Fault) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(2..=4);
    let s = rng.random_range(2..=4);
    let h = rng.random_range(3..=6);
    let d = rng.random_range(classes..=classes + 2);
    let n = rng.random_range(classes + 2..=12);
    let labels: Vec<usize> = (0..n)
        .map(|i| if i < classes { i } else { rng.random_range(0..classes) })
        .collect();
    let inputs = gaussian(n, s, &mut rng);
    let mut params = MlpParams::init(s, h, d, classes, rng.random());
    // nonzero biases so the bias paths are exercised
    params.b1 = gaussian(h, 1, &mut rng).column(0) * 0.3;
    params.b2 = gaussian(d, 1, &mut rng).column(0) * 0.3;
    let frame = make_etf(d, classes, 1.0, rng.random())?;
    let w_c = frame.matrix();

    let fwd = forward(&params, &inputs)?;
    let batch = FeatureBatch::new(fwd.features.clone(), labels.clone(), classes)?;
    let out = total_loss_with(&batch, &params.w_pr, w_c, lambda)?;
    let mut feature_grad = out.feature_grad;
    if fault == Fault::FlipFeatureGrad && lambda != 0.0 {
        let g = cr_grad_features_with(&center_pool(&batch), w_c)?;
        feature_grad -= g * (2.0 * lambda);
    }
    let grads = backward(&params, &fwd.cache, &feature_grad, &out.classifier_grad)?;
    let analytic = flatten(&MlpParams {
        w1: grads.w1,
        b1: grads.b1,
        w2: grads.w2,
        b2: grads.b2,
        w_pr: grads.w_pr,
    });

    let mut x = flatten(&params);
    let numeric = numeric_gradient(&mut x, |v| {
        let p = unflatten(v, &params);
        let f = forward(&p, &inputs)?;
        let b = FeatureBatch::new(f.features, labels.clone(), classes)?;
        Ok(total_loss_with(&b, &p.w_pr, w_c, lambda)?.breakdown.total)
    })?;
    Ok(relative_error(&analytic, &numeric))
}

/// Runs one suite over `trials` instances seeded `seed, seed + 1, ...`.
pub fn run_suite(suite: Suite, trials: usize, seed: u64, fault: Fault) -> Result<SuiteResult> {
    let mut worst_error = 0.0_f64;
    let mut worst_seed = seed;
    for i in 0..trials {
        let s = seed.wrapping_add(i as u64);
        let err = match suite {
            Suite::CenterClassifier => center_classifier_trial(s)?,
            Suite::CenterFeatures => center_features_trial(s, fault)?,
            Suite::PixelCe => pixel_ce_trial(s)?,
            Suite::EndToEnd => {
                end_to_end_trial(s, E2E_LAMBDAS[(s % 3) as usize], fault)?
            }
        };
        if err > worst_error || i == 0 {
            worst_error = err;
            worst_seed = s;
        }
    }
    Ok(SuiteResult {
        suite,
        trials,
        worst_error,
        worst_seed,
        passed: worst_error <= GRAD_TOL,
    })
}

pub fn run_all(trials: usize, seed: u64, fault: Fault) -> Result<Vec<SuiteResult>> {
    Suite::ALL
        .iter()
        .map(|&s| run_suite(s, trials, seed, fault))
        .collect()
}
