//! Training loop, evaluation records and the comparison drivers.
//!
//! Every run derives all of its randomness from `TrainConfig::seed`: the
//! class prototypes, the training and held-out scenes, the network
//! initialization and the frames. Runs that differ only in the loss settings
//! therefore see the same data and start from the same weights.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::etf::{make_etf, EtfFrame};
use crate::loss::{center_pool, cr_grad_classifier, cr_grad_features_with, cr_loss_with, pr_loss_and_grad};
use crate::metrics::{
    centered_normalized_means, class_stats, equiangularity_std, head_common_tail_split,
    max_angle_deviation, self_duality_gap, FeatureBatch, FrequencySplit, DEFAULT_CENTER_EPS,
};
use crate::toy::mlp::sgd_update;
use crate::toy::{backward, forward, gen_scene, predict, sgd_step, MlpParams, Scene, SceneConfig, SgdConfig};

/// Loss weight used by the center branch unless configured otherwise.
pub const DEFAULT_LAMBDA: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelClassifierMode {
    Learned,
    FixedEtf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterClassifierMode {
    FixedEtf,
    Learned,
    Off,
}

/// Which pixels are pooled into one center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterScope {
    /// One center per class over the whole mini-batch.
    Batch,
    /// One center per class per scene in the mini-batch.
    Scene,
}

impl PixelClassifierMode {
    pub fn label(self) -> &'static str {
        match self {
            PixelClassifierMode::Learned => "learned",
            PixelClassifierMode::FixedEtf => "fixed",
        }
    }
}

impl CenterClassifierMode {
    pub fn label(self) -> &'static str {
        match self {
            CenterClassifierMode::FixedEtf => "fixed",
            CenterClassifierMode::Learned => "learned",
            CenterClassifierMode::Off => "-",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Scene template; `seed` and `proto_seed` are overwritten per scene.
    pub scene: SceneConfig,
    pub hidden: usize,
    pub feature_dim: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub pr_mode: PixelClassifierMode,
    pub cc_mode: CenterClassifierMode,
    pub center_scope: CenterScope,
    pub lr: f64,
    pub weight_decay: f64,
    /// Poly decay `lr * (1 - t/T)^power` when set; constant otherwise.
    pub poly_power: Option<f64>,
    pub iterations: usize,
    pub eval_every: usize,
    pub batch_scenes: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            hidden: 32,
            feature_dim: 16,
            lambda: DEFAULT_LAMBDA,
            alpha: 1.0,
            pr_mode: PixelClassifierMode::Learned,
            cc_mode: CenterClassifierMode::FixedEtf,
            center_scope: CenterScope::Batch,
            lr: 0.05,
            weight_decay: 5e-2,
            poly_power: None,
            iterations: 300,
            eval_every: 50,
            batch_scenes: 4,
            train_scenes: 32,
            eval_scenes: 8,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn classes(&self) -> usize {
        self.scene.classes
    }

    /// The same run without the center branch.
    pub fn baseline(&self) -> Self {
        Self {
            lambda: 0.0,
            cc_mode: CenterClassifierMode::Off,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.cc_mode == CenterClassifierMode::Off && self.lambda != 0.0 {
            return bad(format!(
                "center classifier is off but lambda = {}; use lambda = 0",
                self.lambda
            ));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if self.feature_dim < self.classes() {
            return bad(format!(
                "feature_dim {} must be >= classes {} for the ETF frames",
                self.feature_dim,
                self.classes()
            ));
        }
        if self.hidden == 0 {
            return bad("hidden must be positive".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if let Some(p) = self.poly_power {
            if !(p > 0.0) {
                return bad(format!("poly_power must be > 0, got {p}"));
            }
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if self.batch_scenes == 0 || self.train_scenes == 0 || self.eval_scenes == 0 {
            return bad("batch_scenes, train_scenes and eval_scenes must be positive".into());
        }
        Ok(())
    }
}

/// One evaluation on the held-out scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub pr_loss: f64,
    pub cr_loss: f64,
    pub total: f64,
    pub equiang_std_centers: f64,
    pub maxangle_avg_centers: f64,
    pub self_duality_gap: f64,
    pub accuracy: f64,
    pub head_accuracy: f64,
    pub common_accuracy: f64,
    pub tail_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Largest `| ‖w_k - w_k'‖^2 - alpha^2 2K/(K-1) |` over the center frame.
    pub frame_sqdist_max_dev: f64,
}

impl EvalRecord {
    fn scalars(&self) -> [f64; 11] {
        [
            self.pr_loss,
            self.cr_loss,
            self.total,
            self.equiang_std_centers,
            self.maxangle_avg_centers,
            self.self_duality_gap,
            self.accuracy,
            self.head_accuracy,
            self.common_accuracy,
            self.tail_accuracy,
            self.frame_sqdist_max_dev,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.scalars().iter().all(|v| v.is_finite())
            && self.per_class_accuracy.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EvalRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }

    /// Records strictly increasing in iteration, every metric finite.
    pub fn validate(&self, classes: usize) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if !r.is_finite() {
                return Err(Error::Numeric(format!("record {i} has a non-finite metric")));
            }
            if r.per_class_accuracy.len() != classes {
                return Err(Error::Numeric(format!(
                    "record {i} has {} per-class accuracies, expected {classes}",
                    r.per_class_accuracy.len()
                )));
            }
            if i > 0 && r.iteration <= self.records[i - 1].iteration {
                return Err(Error::Numeric(format!("record {i} is out of order")));
            }
        }
        Ok(())
    }
}

/// Network plus, optionally, the center branch it was trained with.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: MlpParams,
    /// Center classifier used during training (fixed frame or learned).
    pub center_classifier: Option<DMatrix<f64>>,
}

impl TrainedModel {
    /// Drops the center branch; evaluation never uses it.
    pub fn without_center_branch(&self) -> Self {
        Self {
            params: self.params.clone(),
            center_classifier: None,
        }
    }

    pub fn predict(&self, inputs: &DMatrix<f64>) -> Result<Vec<usize>> {
        predict(&self.params, inputs)
    }

    pub fn logits(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(forward(&self.params, inputs)?.logits)
    }
}

/// splitmix64 over `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(index.wrapping_mul(0x94d0_49bb_1331_11eb))
        .wrapping_add(0x2545_f491_4f6c_dd1d);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_PROTO: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_FRAME: u64 = 4;
const STREAM_PR_FRAME: u64 = 5;
const STREAM_CC_INIT: u64 = 6;

/// Scenes with their inputs stacked into one matrix.
#[derive(Debug, Clone)]
pub struct SceneSet {
    pub scenes: Vec<Scene>,
    pub inputs: DMatrix<f64>,
    pub labels: Vec<usize>,
}

impl SceneSet {
    pub fn new(scenes: Vec<Scene>) -> Self {
        let refs: Vec<&Scene> = scenes.iter().collect();
        let (inputs, labels) = stack(&refs);
        Self {
            scenes,
            inputs,
            labels,
        }
    }
}

fn stack(scenes: &[&Scene]) -> (DMatrix<f64>, Vec<usize>) {
    let n: usize = scenes.iter().map(|s| s.len()).sum();
    let s_dim = scenes[0].inputs.ncols();
    let mut inputs = DMatrix::<f64>::zeros(n, s_dim);
    let mut labels = Vec::with_capacity(n);
    let mut offset = 0;
    for scene in scenes {
        inputs
            .rows_mut(offset, scene.len())
            .copy_from(&scene.inputs);
        labels.extend_from_slice(&scene.labels);
        offset += scene.len();
    }
    (inputs, labels)
}

fn scene_config(cfg: &TrainConfig, stream: u64, index: usize) -> SceneConfig {
    SceneConfig {
        seed: derive_seed(cfg.seed, stream, index as u64),
        proto_seed: derive_seed(cfg.seed, STREAM_PROTO, 0),
        ..cfg.scene.clone()
    }
}

/// Generator settings of each training scene of a run.
pub fn training_scene_configs(cfg: &TrainConfig) -> Vec<SceneConfig> {
    (0..cfg.train_scenes)
        .map(|i| scene_config(cfg, STREAM_TRAIN, i))
        .collect()
}

/// Training scenes of a run.
pub fn training_scenes(cfg: &TrainConfig) -> Result<Vec<Scene>> {
    training_scene_configs(cfg).iter().map(gen_scene).collect()
}

/// Held-out scenes of a run, drawn from a seed stream disjoint from training.
pub fn held_out_scenes(cfg: &TrainConfig) -> Result<Vec<Scene>> {
    (0..cfg.eval_scenes)
        .map(|i| gen_scene(&scene_config(cfg, STREAM_EVAL, i)))
        .collect()
}

/// The fixed center frame of a run. Also used as the reference classifier
/// for reporting the center loss of runs without a center branch.
pub fn center_frame(cfg: &TrainConfig) -> Result<EtfFrame> {
    make_etf(
        cfg.feature_dim,
        cfg.classes(),
        cfg.alpha,
        derive_seed(cfg.seed, STREAM_FRAME, 0),
    )
}

/// Per-class accuracy summary of predictions against labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub overall: f64,
    pub per_class: Vec<f64>,
    pub head: f64,
    pub common: f64,
    pub tail: f64,
}

pub fn accuracy_report(
    predictions: &[usize],
    labels: &[usize],
    classes: usize,
    split: &FrequencySplit,
) -> AccuracyReport {
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    let mut correct = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        totals[l] += 1;
        if p == l {
            hits[l] += 1;
            correct += 1;
        }
    }
    // classes missing from the evaluation set count as 0 accuracy
    let per_class: Vec<f64> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect();
    let group = |idx: &[usize]| idx.iter().map(|&c| per_class[c]).sum::<f64>() / idx.len() as f64;
    AccuracyReport {
        overall: correct as f64 / labels.len() as f64,
        head: group(&split.head),
        common: group(&split.common),
        tail: group(&split.tail),
        per_class,
    }
}

struct RunState<'a> {
    cfg: &'a TrainConfig,
    params: MlpParams,
    center: DMatrix<f64>,
    frame_dev: f64,
    eval: &'a SceneSet,
    split: FrequencySplit,
}

impl RunState<'_> {
    fn evaluate(&self, iteration: usize) -> Result<EvalRecord> {
        let cfg = self.cfg;
        let k = cfg.classes();
        let fwd = forward(&self.params, &self.eval.inputs)?;
        let batch = FeatureBatch::new(fwd.features, self.eval.labels.clone(), k)?;
        let pr = pr_loss_and_grad(&batch, &self.params.w_pr)?;
        let cr = cr_loss_with(&center_pool(&batch), &self.center)?;
        let stats = class_stats(&batch);
        let zhat = centered_normalized_means(&stats, DEFAULT_CENTER_EPS)?;
        let predictions = predict(&self.params, &self.eval.inputs)?;
        let acc = accuracy_report(&predictions, &self.eval.labels, k, &self.split);
        Ok(EvalRecord {
            iteration,
            pr_loss: pr.loss,
            cr_loss: cr,
            total: pr.loss + cfg.lambda * cr,
            equiang_std_centers: equiangularity_std(&zhat.rows)?,
            maxangle_avg_centers: max_angle_deviation(&zhat.rows)?,
            self_duality_gap: self_duality_gap(&self.params.w_pr, &zhat)?,
            accuracy: acc.overall,
            head_accuracy: acc.head,
            common_accuracy: acc.common,
            tail_accuracy: acc.tail,
            per_class_accuracy: acc.per_class,
            frame_sqdist_max_dev: self.frame_dev,
        })
    }
}

fn diverged(iteration: usize, log: &TrainLog) -> Error {
    Error::Diverged {
        iteration,
        partial: Box::new(log.clone()),
    }
}

/// Runs training and returns the evaluation log.
pub fn train(cfg: &TrainConfig) -> Result<TrainLog> {
    train_model(cfg).map(|(log, _)| log)
}

/// Runs training; returns the log and the trained network.
///
/// An evaluation record is written at iteration 0, every `eval_every`
/// iterations and after the last iteration.
pub fn train_model(cfg: &TrainConfig) -> Result<(TrainLog, TrainedModel)> {
    cfg.validate()?;
    let k = cfg.classes();
    let d = cfg.feature_dim;
    let train_set = training_scenes(cfg)?;
    let eval = SceneSet::new(held_out_scenes(cfg)?);
    let split = head_common_tail_split(&cfg.scene.target_counts()?)?;

    let mut params = MlpParams::init(
        cfg.scene.input_dim,
        cfg.hidden,
        d,
        k,
        derive_seed(cfg.seed, STREAM_INIT, 0),
    );
    if cfg.pr_mode == PixelClassifierMode::FixedEtf {
        params.w_pr = make_etf(d, k, cfg.alpha, derive_seed(cfg.seed, STREAM_PR_FRAME, 0))?
            .matrix()
            .clone();
    }
    let frame = center_frame(cfg)?;
    let center = match cfg.cc_mode {
        CenterClassifierMode::Learned => {
            MlpParams::init(1, 1, d, k, derive_seed(cfg.seed, STREAM_CC_INIT, 0)).w_pr
        }
        _ => frame.matrix().clone(),
    };
    let frame_dev = frame.max_pair_sqdist_deviation();

    let mut state = RunState {
        cfg,
        params,
        center,
        frame_dev,
        eval: &eval,
        split,
    };
    let mut log = TrainLog::default();
    let record = state.evaluate(0)?;
    if !record.is_finite() {
        return Err(diverged(0, &log));
    }
    log.records.push(record);

    let use_center = cfg.cc_mode != CenterClassifierMode::Off && cfg.lambda > 0.0;
    let learn_center = use_center && cfg.cc_mode == CenterClassifierMode::Learned;
    let sgd_base = SgdConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        freeze_classifier: cfg.pr_mode == PixelClassifierMode::FixedEtf,
    };

    for t in 0..cfg.iterations {
        let lr = match cfg.poly_power {
            Some(p) => cfg.lr * (1.0 - t as f64 / cfg.iterations as f64).powf(p),
            None => cfg.lr,
        };
        let picked: Vec<&Scene> = (0..cfg.batch_scenes)
            .map(|b| &train_set[(t * cfg.batch_scenes + b) % train_set.len()])
            .collect();
        let (inputs, labels) = stack(&picked);
        let fwd = forward(&state.params, &inputs)?;
        let batch = FeatureBatch::new(fwd.features, labels, k)?;
        let pr = pr_loss_and_grad(&batch, &state.params.w_pr)?;
        let mut loss = pr.loss;
        let mut feature_grad = pr.feature_grad;
        let mut center_grad = DMatrix::<f64>::zeros(d, k);

        if use_center {
            let pieces: Vec<(usize, usize)> = match cfg.center_scope {
                CenterScope::Batch => vec![(0, batch.len())],
                CenterScope::Scene => {
                    let mut offset = 0;
                    picked
                        .iter()
                        .map(|s| {
                            let r = (offset, s.len());
                            offset += s.len();
                            r
                        })
                        .collect()
                }
            };
            for (start, len) in pieces {
                let sub = if len == batch.len() {
                    batch.clone()
                } else {
                    FeatureBatch::new(
                        batch.features().rows(start, len).into_owned(),
                        batch.labels()[start..start + len].to_vec(),
                        k,
                    )?
                };
                let cb = center_pool(&sub);
                loss += cfg.lambda * cr_loss_with(&cb, &state.center)?;
                let g = cr_grad_features_with(&cb, &state.center)? * cfg.lambda;
                let mut rows = feature_grad.rows_mut(start, len);
                rows += g;
                if learn_center {
                    center_grad += cr_grad_classifier(&cb, &state.center)? * cfg.lambda;
                }
            }
        }
        if !loss.is_finite() {
            return Err(diverged(t, &log));
        }

        let grads = backward(&state.params, &fwd.cache, &feature_grad, &pr.classifier_grad)?;
        let sgd = SgdConfig { lr, ..sgd_base };
        if sgd_step(&mut state.params, &grads, sgd).is_err() {
            return Err(diverged(t, &log));
        }
        if learn_center {
            if center_grad.iter().any(|v| !v.is_finite()) {
                return Err(diverged(t, &log));
            }
            sgd_update(state.center.as_mut_slice(), center_grad.as_slice(), lr, cfg.weight_decay);
        }

        let done = t + 1;
        if done % cfg.eval_every == 0 || done == cfg.iterations {
            // the first evaluation succeeded, so a failure here means the
            // network has degenerated (saturated or non-finite features)
            let record = match state.evaluate(done) {
                Ok(r) if r.is_finite() => r,
                Ok(_)
                | Err(Error::Numeric(_))
                | Err(Error::Normalization { .. })
                | Err(Error::InsufficientClasses { .. })
                | Err(Error::DegenerateColumn { .. }) => return Err(diverged(done, &log)),
                Err(e) => return Err(e),
            };
            log.records.push(record);
        }
    }

    let center_classifier = match cfg.cc_mode {
        CenterClassifierMode::Off => None,
        _ => Some(state.center),
    };
    Ok((
        log,
        TrainedModel {
            params: state.params,
            center_classifier,
        },
    ))
}

/// Final metrics of one arm of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub pr_mode: PixelClassifierMode,
    pub cc_mode: CenterClassifierMode,
    pub lambda: f64,
    pub accuracy: f64,
    pub head_accuracy: f64,
    pub common_accuracy: f64,
    pub tail_accuracy: f64,
    pub equiang_std_centers: f64,
    pub maxangle_avg_centers: f64,
    pub self_duality_gap: f64,
}

impl ArmSummary {
    fn from_run(cfg: &TrainConfig, log: &TrainLog) -> Result<Self> {
        let r = log
            .last()
            .ok_or_else(|| Error::Numeric("empty training log".into()))?;
        Ok(Self {
            pr_mode: cfg.pr_mode,
            cc_mode: cfg.cc_mode,
            lambda: cfg.lambda,
            accuracy: r.accuracy,
            head_accuracy: r.head_accuracy,
            common_accuracy: r.common_accuracy,
            tail_accuracy: r.tail_accuracy,
            equiang_std_centers: r.equiang_std_centers,
            maxangle_avg_centers: r.maxangle_avg_centers,
            self_duality_gap: r.self_duality_gap,
        })
    }
}

/// Rows of a comparison in declared arm order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ArmSummary>,
}

fn run_arms(arms: Vec<TrainConfig>) -> Result<ComparisonTable> {
    let rows: Result<Vec<ArmSummary>> = arms
        .par_iter()
        .map(|cfg| {
            let log = train(cfg)?;
            ArmSummary::from_run(cfg, &log)
        })
        .collect();
    Ok(ComparisonTable { rows: rows? })
}

/// The five pixel-classifier / center-classifier variants:
/// learned/-, fixed/fixed, fixed/learned, learned/fixed, learned/learned.
pub fn ablation_arms(base: &TrainConfig) -> Vec<TrainConfig> {
    use CenterClassifierMode as C;
    use PixelClassifierMode as P;
    let lambda = if base.lambda > 0.0 { base.lambda } else { DEFAULT_LAMBDA };
    [
        (P::Learned, C::Off),
        (P::FixedEtf, C::FixedEtf),
        (P::FixedEtf, C::Learned),
        (P::Learned, C::FixedEtf),
        (P::Learned, C::Learned),
    ]
    .into_iter()
    .map(|(pr_mode, cc_mode)| TrainConfig {
        pr_mode,
        cc_mode,
        lambda: if cc_mode == C::Off { 0.0 } else { lambda },
        ..base.clone()
    })
    .collect()
}

/// Runs the classifier ablation under shared seeds.
pub fn run_ablation_grid(base: &TrainConfig) -> Result<ComparisonTable> {
    base.validate()?;
    run_arms(ablation_arms(base))
}

/// `0.0, 0.1, …, 0.6`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=6).map(|i| i as f64 / 10.0).collect()
}

/// One run per loss weight, everything else shared with `base`.
pub fn lambda_sweep(base: &TrainConfig, lambdas: &[f64]) -> Result<ComparisonTable> {
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::Config(format!("sweep lambda must be >= 0, got {l}")));
    }
    let cc_mode = match base.cc_mode {
        CenterClassifierMode::Off => CenterClassifierMode::FixedEtf,
        m => m,
    };
    let arms: Vec<TrainConfig> = lambdas
        .iter()
        .map(|&lambda| TrainConfig {
            lambda,
            cc_mode,
            ..base.clone()
        })
        .collect();
    for a in &arms {
        a.validate()?;
    }
    run_arms(arms)
}
