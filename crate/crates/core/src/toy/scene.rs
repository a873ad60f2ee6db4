//! Synthetic imbalanced segmentation scenes.
//!
//! A scene is an `H x W` label grid made of contiguous blobs. Class sizes
//! follow a geometric profile from the largest class down to
//! `largest / beta`. Every pixel carries an `s`-dimensional raw input: the
//! class prototype plus isotropic Gaussian noise, box-averaged over a small
//! window so that neighbouring pixels share information.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Target `n_max / n_min` of the per-class pixel counts.
    pub beta: f64,
    /// Raw per-pixel input dimension `s`.
    pub input_dim: usize,
    /// Total number of region seeds shared among the classes.
    pub blob_count: usize,
    pub noise_sigma: f64,
    pub smooth_radius: usize,
    /// Per-scene randomness: layout and noise.
    pub seed: u64,
    /// Dataset-level randomness: the class prototypes. Scenes meant to come
    /// from the same distribution must share it.
    pub proto_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            classes: 10,
            beta: 100.0,
            input_dim: 8,
            blob_count: 40,
            noise_sigma: 1.5,
            smooth_radius: 1,
            seed: 0,
            proto_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 3 {
            return Err(Error::Config(format!(
                "scenes need at least 3 classes, got {}",
                self.classes
            )));
        }
        if !(self.beta >= 1.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be >= 1, got {}", self.beta)));
        }
        if self.pixels() < self.classes {
            return Err(Error::Config(format!(
                "{}x{} grid cannot hold {} classes",
                self.height, self.width, self.classes
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.blob_count < self.classes || self.blob_count > self.pixels() {
            return Err(Error::Config(format!(
                "blob_count must lie in {}..={}, got {}",
                self.classes,
                self.pixels(),
                self.blob_count
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Per-class pixel quotas: geometric in the class index, rounded by
    /// largest remainder so they sum to `H * W`.
    pub fn target_counts(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let k = self.classes;
        let weights: Vec<f64> = (0..k)
            .map(|c| self.beta.powf(-(c as f64) / (k as f64 - 1.0)))
            .collect();
        let counts = apportion(self.pixels(), &weights);
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Generation(format!(
                "class {c} would get no pixels on a {}x{} grid with beta = {}",
                self.height, self.width, self.beta
            )));
        }
        Ok(counts)
    }
}

/// Splits `total` proportionally to `weights` (largest remainder, ties to
/// the lower index).
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `N x s`, row-major over the grid (`row * width + col`).
    pub inputs: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub pixel_counts: Vec<usize>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Class prototypes `K x s` drawn from `proto_seed`.
pub fn class_prototypes(cfg: &SceneConfig) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.proto_seed ^ 0x5eed_0f_c1a55);
    DMatrix::from_fn(cfg.classes, cfg.input_dim, |_, _| {
        StandardNormal.sample(&mut rng)
    })
}

pub fn gen_scene(cfg: &SceneConfig) -> Result<Scene> {
    let targets = cfg.target_counts()?;
    let (h, w, k) = (cfg.height, cfg.width, cfg.classes);
    let n = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // seeds per class: one each, the rest proportional to the quotas
    let extra = apportion(
        cfg.blob_count - k,
        &targets.iter().map(|&t| t as f64).collect::<Vec<_>>(),
    );
    let mut seed_class = Vec::with_capacity(cfg.blob_count);
    for c in 0..k {
        seed_class.extend(std::iter::repeat(c).take(1 + extra[c]));
    }
    let seed_pixels: Vec<usize> = sample(&mut rng, n, cfg.blob_count).into_vec();

    // nearest available seed: visit (pixel, seed) pairs by distance and
    // give each pixel to the first seed whose class still has quota
    let mut pairs: Vec<(usize, u32, u32)> = Vec::with_capacity(n * seed_pixels.len());
    for p in 0..n {
        let (pr, pc) = ((p / w) as isize, (p % w) as isize);
        for (s, &sp) in seed_pixels.iter().enumerate() {
            let (sr, sc) = ((sp / w) as isize, (sp % w) as isize);
            let dist = ((pr - sr).pow(2) + (pc - sc).pow(2)) as usize;
            pairs.push((dist, p as u32, s as u32));
        }
    }
    pairs.sort_unstable();
    let mut labels = vec![usize::MAX; n];
    let mut remaining = targets.clone();
    let mut unassigned = n;
    for (_, p, s) in pairs {
        let (p, s) = (p as usize, s as usize);
        if labels[p] != usize::MAX {
            continue;
        }
        let c = seed_class[s];
        if remaining[c] == 0 {
            continue;
        }
        labels[p] = c;
        remaining[c] -= 1;
        unassigned -= 1;
        if unassigned == 0 {
            break;
        }
    }
    debug_assert!(labels.iter().all(|&l| l < k));

    let protos = class_prototypes(cfg);
    let s_dim = cfg.input_dim;
    let mut raw = DMatrix::<f64>::zeros(n, s_dim);
    for p in 0..n {
        for j in 0..s_dim {
            let eps: f64 = StandardNormal.sample(&mut rng);
            raw[(p, j)] = protos[(labels[p], j)] + cfg.noise_sigma * eps;
        }
    }
    let inputs = box_smooth(&raw, h, w, cfg.smooth_radius);

    let mut pixel_counts = vec![0usize; k];
    for &l in &labels {
        pixel_counts[l] += 1;
    }
    Ok(Scene {
        inputs,
        labels,
        pixel_counts,
    })
}

/// Mean over the `(2r+1)^2` window clipped to the grid.
fn box_smooth(raw: &DMatrix<f64>, h: usize, w: usize, r: usize) -> DMatrix<f64> {
    if r == 0 {
        return raw.clone();
    }
    let s = raw.ncols();
    let mut out = DMatrix::<f64>::zeros(raw.nrows(), s);
    for row in 0..h {
        let r0 = row.saturating_sub(r);
        let r1 = (row + r).min(h - 1);
        for col in 0..w {
            let c0 = col.saturating_sub(r);
            let c1 = (col + r).min(w - 1);
            let count = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
            let p = row * w + col;
            for j in 0..s {
                let mut acc = 0.0;
                for rr in r0..=r1 {
                    for cc in c0..=c1 {
                        acc += raw[(rr * w + cc, j)];
                    }
                }
                out[(p, j)] = acc / count;
            }
        }
    }
    out
}

/// Number of scenes each class appears in, which is the number of centers
/// the class contributes when centers are pooled per scene.
pub fn scene_center_counts(scenes: &[Scene], classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; classes];
    for scene in scenes {
        for (c, slot) in counts.iter_mut().enumerate() {
            if scene.pixel_counts.get(c).copied().unwrap_or(0) > 0 {
                *slot += 1;
            }
        }
    }
    counts
}

/// Pixel counts summed over scenes.
pub fn total_pixel_counts(scenes: &[Scene], classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; classes];
    for scene in scenes {
        for (slot, n) in counts.iter_mut().zip(&scene.pixel_counts) {
            *slot += n;
        }
    }
    counts
}
