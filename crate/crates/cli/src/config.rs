//! Run settings shared by `train`, `ablation`, `sweep` and `gen-data`.
//!
//! Every setting can come from a flag or from a TOML file passed with
//! `--config`. A flag wins over the file, the file wins over the default.

use std::path::PathBuf;

use ceco_core::harness::{CenterClassifierMode, CenterScope, PixelClassifierMode, TrainConfig};
use clap::{Args, ValueEnum};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrMode {
    Learned,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CcMode {
    Fixed,
    Learned,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Batch,
    Scene,
}

/// Optional overrides. Field names double as TOML keys.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunArgs {
    /// Scene height in pixels
    #[arg(long)]
    pub height: Option<usize>,
    /// Scene width in pixels
    #[arg(long)]
    pub width: Option<usize>,
    /// Number of classes K
    #[arg(long)]
    pub classes: Option<usize>,
    /// Pixel imbalance factor of the generator (n_max / n_min)
    #[arg(long)]
    pub beta: Option<f64>,
    /// Raw per-pixel input dimension
    #[arg(long)]
    pub input_dim: Option<usize>,
    /// Region seeds per scene
    #[arg(long)]
    pub blobs: Option<usize>,
    /// Std of the per-pixel input noise
    #[arg(long)]
    pub noise: Option<f64>,
    /// Box-smoothing radius of the inputs
    #[arg(long)]
    pub smooth_radius: Option<usize>,
    /// Hidden width of the feature extractor
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Feature dimension d
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Weight of the center loss
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Scale of the fixed ETF classifiers
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Pixel classifier
    #[arg(long, value_enum)]
    pub pr_mode: Option<PrMode>,
    /// Center classifier ("off" drops the center branch)
    #[arg(long, value_enum)]
    pub cc_mode: Option<CcMode>,
    /// Pool centers per mini-batch or per scene
    #[arg(long, value_enum)]
    pub center_scope: Option<Scope>,
    /// SGD learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Enable polynomial learning-rate decay with this power
    #[arg(long)]
    pub poly_power: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Scenes per mini-batch
    #[arg(long)]
    pub batch_scenes: Option<usize>,
    #[arg(long)]
    pub train_scenes: Option<usize>,
    #[arg(long)]
    pub eval_scenes: Option<usize>,
    /// Seed for data, initialization and frames
    #[arg(long)]
    pub seed: Option<u64>,
}

macro_rules! merge_fields {
    ($a:expr, $b:expr, $($f:ident),*) => {
        RunArgs { $($f: $a.$f.or($b.$f)),* }
    };
}

impl RunArgs {
    /// Values set here, falling back to `other`.
    pub fn or(self, other: RunArgs) -> RunArgs {
        merge_fields!(
            self, other, height, width, classes, beta, input_dim, blobs, noise, smooth_radius,
            hidden, feature_dim, lambda, alpha, pr_mode, cc_mode, center_scope, lr,
            weight_decay, poly_power, iterations, eval_every, batch_scenes, train_scenes,
            eval_scenes, seed
        )
    }

    pub fn from_toml(text: &str) -> Result<RunArgs, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Applies the overrides to the built-in defaults. An explicit
    /// `--cc-mode off` without `--lambda` implies a zero loss weight.
    pub fn resolve(&self) -> TrainConfig {
        let mut c = TrainConfig::default();
        let s = &mut c.scene;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(s.height, self.height);
        set!(s.width, self.width);
        set!(s.classes, self.classes);
        set!(s.beta, self.beta);
        set!(s.input_dim, self.input_dim);
        set!(s.blob_count, self.blobs);
        set!(s.noise_sigma, self.noise);
        set!(s.smooth_radius, self.smooth_radius);
        set!(c.hidden, self.hidden);
        set!(c.feature_dim, self.feature_dim);
        set!(c.alpha, self.alpha);
        set!(c.lr, self.lr);
        set!(c.weight_decay, self.weight_decay);
        set!(c.iterations, self.iterations);
        set!(c.eval_every, self.eval_every);
        set!(c.batch_scenes, self.batch_scenes);
        set!(c.train_scenes, self.train_scenes);
        set!(c.eval_scenes, self.eval_scenes);
        set!(c.seed, self.seed);
        if self.poly_power.is_some() {
            c.poly_power = self.poly_power;
        }
        if let Some(m) = self.pr_mode {
            c.pr_mode = match m {
                PrMode::Learned => PixelClassifierMode::Learned,
                PrMode::Fixed => PixelClassifierMode::FixedEtf,
            };
        }
        if let Some(m) = self.cc_mode {
            c.cc_mode = match m {
                CcMode::Fixed => CenterClassifierMode::FixedEtf,
                CcMode::Learned => CenterClassifierMode::Learned,
                CcMode::Off => CenterClassifierMode::Off,
            };
            if m == CcMode::Off && self.lambda.is_none() {
                c.lambda = 0.0;
            }
        }
        if let Some(m) = self.center_scope {
            c.center_scope = match m {
                Scope::Batch => CenterScope::Batch,
                Scope::Scene => CenterScope::Scene,
            };
        }
        set!(c.lambda, self.lambda);
        c
    }
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArg {
    /// TOML file with run settings (keys as the flag names, using `_`)
    #[arg(long)]
    pub config: Option<PathBuf>,
}
