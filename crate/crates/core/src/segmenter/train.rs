//! Deterministic mini-batch SGD for the pixel classifier.
//!
//! Iteration `i` draws its crops from RNG streams indexed by `i`, so the loss
//! trace does not depend on how many threads featurize the crops.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig};
use super::features::{featurize_at, FeatureSpec};
use super::loss::{tversky_flat, TverskyParams};
use super::model::{softmax, PixelClassifier};
use crate::error::{ensure_param, Error, Result};
use crate::imaging::{Image, LabelMap, N_OUTPUTS};
use crate::mixer::{sample_mixed_crop, MixerConfig, SamplePool};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Crops of single homogeneous images.
    Baseline,
    /// Composites drawn through the mixer.
    Cellmixer,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Cellmixer => "cellmixer",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "cellmixer" => Ok(TrainMode::Cellmixer),
            other => Err(Error::InvalidParameter(format!(
                "unknown training mode {other:?}"
            ))),
        }
    }
}

/// Step size over the course of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 - i / iterations)^power`.
    Poly {
        power: f64,
    },
}

impl LrSchedule {
    pub fn factor(&self, iteration: usize, iterations: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Poly { power } => (1.0 - iteration as f64 / iterations as f64)
                .max(0.0)
                .powf(power),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// Pixels per iteration, split evenly over the crops of the batch.
    pub batch_pixels: usize,
    pub crops_per_batch: usize,
    pub crop_size: usize,
    pub tversky_alpha: f64,
    pub tversky_beta: f64,
    pub tversky_smooth: f64,
    pub seed: u64,
    /// Crops used to estimate feature standardization before training.
    pub norm_crops: usize,
    pub features: FeatureSpec,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            lr_schedule: LrSchedule::Poly { power: 0.9 },
            momentum: 0.99,
            weight_decay: 0.0,
            iterations: 2000,
            batch_pixels: 4096,
            crops_per_batch: 4,
            crop_size: 128,
            tversky_alpha: 0.7,
            tversky_beta: 0.3,
            tversky_smooth: 1.0,
            seed: 0,
            norm_crops: 16,
            features: FeatureSpec::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 518 px crops, 16 crops per batch, 20k iterations.
    pub fn full_scale() -> Self {
        Self {
            iterations: 20_000,
            crops_per_batch: 16,
            batch_pixels: 16 * 4096,
            crop_size: 518,
            ..Self::default()
        }
    }

    pub fn tversky(&self) -> TverskyParams {
        TverskyParams {
            alpha: self.tversky_alpha,
            beta: self.tversky_beta,
            smooth: self.tversky_smooth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_param(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            || "learning_rate must be positive".into(),
        )?;
        if let LrSchedule::Poly { power } = self.lr_schedule {
            ensure_param(power >= 0.0 && power.is_finite(), || {
                "poly power must be non-negative".into()
            })?;
        }
        ensure_param((0.0..1.0).contains(&self.momentum), || {
            "momentum must lie in [0, 1)".into()
        })?;
        ensure_param(self.weight_decay >= 0.0, || {
            "weight_decay must be non-negative".into()
        })?;
        ensure_param(self.crops_per_batch >= 1, || {
            "crops_per_batch must be >= 1".into()
        })?;
        ensure_param(self.batch_pixels >= self.crops_per_batch, || {
            "batch_pixels must be at least crops_per_batch".into()
        })?;
        ensure_param(self.crop_size >= 8, || "crop_size must be >= 8".into())?;
        ensure_param(self.norm_crops >= 1, || "norm_crops must be >= 1".into())?;
        self.tversky().validate()?;
        self.features.validate()?;
        self.augment.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: PixelClassifier,
    /// Batch loss before each update.
    pub loss_trace: Vec<f64>,
}

/// Draws one (image, labels) training crop for the given mode.
fn draw_crop(
    pool: &SamplePool,
    mode: TrainMode,
    mixer: &MixerConfig,
    crop: usize,
    rng: &mut StreamRng,
) -> Result<(Image, LabelMap)> {
    match mode {
        TrainMode::Baseline => {
            let entry = &pool.entries[rng.random_range(0..pool.len())];
            let x = rng.random_range(0..=entry.image.width() - crop);
            let y = rng.random_range(0..=entry.image.height() - crop);
            Ok((
                entry.image.crop(x, y, crop, crop)?,
                entry.labels.crop(x, y, crop, crop)?,
            ))
        }
        TrainMode::Cellmixer => {
            let s = sample_mixed_crop(pool, mixer, rng)?;
            Ok((s.image, s.labels))
        }
    }
}

/// Raw features and targets of `n_pixels` random pixels of one augmented crop.
fn crop_batch(
    pool: &SamplePool,
    mode: TrainMode,
    mixer: &MixerConfig,
    cfg: &TrainConfig,
    n_pixels: usize,
    mut rng: StreamRng,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let (img, labels) = draw_crop(pool, mode, mixer, cfg.crop_size, &mut rng)?;
    let (img, labels) = augment(&img, &labels, &cfg.augment, &mut rng)?;
    let idx: Vec<usize> = (0..n_pixels)
        .map(|_| rng.random_range(0..img.len()))
        .collect();
    let feats = featurize_at(&img, &cfg.features, &idx)?;
    let targets = idx.iter().map(|&i| labels.as_slice()[i]).collect();
    Ok((feats, targets))
}

fn check_pool(pool: &SamplePool, cfg: &TrainConfig) -> Result<()> {
    ensure_param(!pool.is_empty(), || "training pool is empty".into())?;
    for e in &pool.entries {
        ensure_param(
            e.image.width() >= cfg.crop_size && e.image.height() >= cfg.crop_size,
            || format!("{}: image smaller than crop size {}", e.id, cfg.crop_size),
        )?;
    }
    Ok(())
}

/// Per-feature mean and standard deviation over a few sampled crops.
fn standardization(
    pool: &SamplePool,
    mode: TrainMode,
    mixer: &MixerConfig,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let per_crop = cfg.batch_pixels.div_ceil(cfg.crops_per_batch);
    let batches = (0..cfg.norm_crops)
        .into_par_iter()
        .map(|j| {
            crop_batch(
                pool,
                mode,
                mixer,
                cfg,
                per_crop,
                rng::stream(cfg.seed, "train-norm", j as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let n = cfg.features.n_features();
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    let mut count = 0usize;
    for (feats, _) in &batches {
        for px in feats.chunks(n) {
            for j in 0..n {
                sum[j] += px[j];
                sum_sq[j] += px[j] * px[j];
            }
            count += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let scale = (0..n)
        .map(|j| {
            let var = (sum_sq[j] / count as f64 - mean[j] * mean[j]).max(0.0);
            let sd = var.sqrt();
            if sd > 1e-8 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    Ok((mean, scale))
}

/// Trains a classifier from zero weights.
///
/// `mixer` supplies the compositing parameters in cellmixer mode; its crop
/// size is overridden by `cfg.crop_size`.
pub fn train(
    pool: &SamplePool,
    cfg: &TrainConfig,
    mode: TrainMode,
    mixer: &MixerConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    check_pool(pool, cfg)?;
    let mixer = MixerConfig {
        crop_size: cfg.crop_size,
        ..mixer.clone()
    };
    if mode == TrainMode::Cellmixer {
        mixer.validate()?;
    }

    let mut model = PixelClassifier::zeros(cfg.features.clone());
    let (mean, scale) = standardization(pool, mode, &mixer, cfg)?;
    model.feature_mean = mean;
    model.feature_scale = scale;

    let n = model.n_features();
    let cols = model.cols();
    let per_crop = cfg.batch_pixels.div_ceil(cfg.crops_per_batch);
    let params = cfg.tversky();
    let mut velocity = vec![0.0; model.weights.len()];
    let mut loss_trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let base = (it * cfg.crops_per_batch) as u64;
        let batches = (0..cfg.crops_per_batch)
            .into_par_iter()
            .map(|j| {
                crop_batch(
                    pool,
                    mode,
                    &mixer,
                    cfg,
                    per_crop,
                    rng::stream(cfg.seed, "train", base + j as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let mut feats = Vec::with_capacity(cfg.crops_per_batch * per_crop * n);
        let mut targets = Vec::with_capacity(cfg.crops_per_batch * per_crop);
        for (f, t) in batches {
            feats.extend(f);
            targets.extend(t);
        }
        feats.chunks_mut(n).for_each(|px| model.standardize(px));

        let mut probs = vec![0.0; targets.len() * N_OUTPUTS];
        for (px, out) in feats.chunks(n).zip(probs.chunks_mut(N_OUTPUTS)) {
            model.scores(px, out);
            softmax(out);
        }
        let out = match tversky_flat(&probs, &targets, &params) {
            Ok(out) => out,
            // A batch made only of ignore pixels carries no signal.
            Err(Error::DegenerateInput(_)) => {
                loss_trace.push(f64::NAN);
                continue;
            }
            Err(e) => return Err(e),
        };
        if !out.loss.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss: out.loss,
            });
        }
        loss_trace.push(out.loss);

        let mut grad = vec![0.0; model.weights.len()];
        for (px, g) in feats.chunks(n).zip(out.grad_scores.chunks(N_OUTPUTS)) {
            for k in 0..N_OUTPUTS {
                if g[k] == 0.0 {
                    continue;
                }
                let row = &mut grad[k * cols..(k + 1) * cols];
                for j in 0..n {
                    row[j] += g[k] * px[j];
                }
                row[n] += g[k];
            }
        }
        let lr = cfg.learning_rate * cfg.lr_schedule.factor(it, cfg.iterations);
        for ((w, v), g) in model.weights.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
            *w -= lr * *v;
        }
        if model.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                loss: f64::NAN,
            });
        }
    }
    Ok(TrainOutput { model, loss_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixer::PoolEntry;

    /// Two classes: bright squares (class 1) and dark squares (class 2).
    fn toy_pool() -> SamplePool {
        let mut entries = Vec::new();
        for (k, (class, value)) in [(1u8, 0.8), (2u8, 0.2), (1, 0.8), (2, 0.2)]
            .into_iter()
            .enumerate()
        {
            let (w, h) = (40, 40);
            let mut img = vec![0.5; w * h];
            let mut lab = vec![0u8; w * h];
            for y in 0..h {
                for x in 0..w {
                    // Deterministic texture keeps background std positive.
                    img[y * w + x] += 0.02 * (((x * 7 + y * 13 + k) % 5) as f64 - 2.0);
                    if (x / 10 + y / 10) % 2 == 0 && x % 10 > 2 && y % 10 > 2 {
                        img[y * w + x] = value;
                        lab[y * w + x] = class;
                    }
                }
            }
            entries.push(PoolEntry {
                id: format!("toy{k}"),
                class,
                image: Image::new(w, h, img).unwrap(),
                labels: LabelMap::new(w, h, lab).unwrap(),
            });
        }
        SamplePool::new(entries).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            iterations: 60,
            batch_pixels: 512,
            crops_per_batch: 2,
            crop_size: 24,
            learning_rate: 0.01,
            norm_crops: 4,
            features: FeatureSpec { radii: vec![1, 2] },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mode_parses() {
        assert_eq!(
            "baseline".parse::<TrainMode>().unwrap(),
            TrainMode::Baseline
        );
        assert_eq!(TrainMode::Cellmixer.to_string(), "cellmixer");
        assert!("other".parse::<TrainMode>().is_err());
    }

    #[test]
    fn loss_decreases_on_separable_toy() {
        let out = train(
            &toy_pool(),
            &small_cfg(),
            TrainMode::Baseline,
            &MixerConfig::default(),
        )
        .unwrap();
        let first = out.loss_trace[..5].iter().sum::<f64>() / 5.0;
        let last = out.loss_trace[55..].iter().sum::<f64>() / 5.0;
        assert!(last < first - 0.1, "first {first} last {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let pool = toy_pool();
        let cfg = small_cfg();
        let a = train(&pool, &cfg, TrainMode::Cellmixer, &MixerConfig::default()).unwrap();
        let b = train(&pool, &cfg, TrainMode::Cellmixer, &MixerConfig::default()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn trace_is_independent_of_thread_count() {
        let pool = toy_pool();
        let cfg = TrainConfig {
            iterations: 10,
            crops_per_batch: 3,
            ..small_cfg()
        };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    train(&pool, &cfg, TrainMode::Baseline, &MixerConfig::default()).unwrap()
                })
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            weight_decay: 1e308,
            momentum: 0.0,
            ..small_cfg()
        };
        let err = train(
            &toy_pool(),
            &cfg,
            TrainMode::Baseline,
            &MixerConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn rejects_empty_pool_and_small_images() {
        let cfg = small_cfg();
        assert!(train(
            &SamplePool::default(),
            &cfg,
            TrainMode::Baseline,
            &MixerConfig::default()
        )
        .is_err());
        let big = TrainConfig {
            crop_size: 64,
            ..small_cfg()
        };
        assert!(train(
            &toy_pool(),
            &big,
            TrainMode::Baseline,
            &MixerConfig::default()
        )
        .is_err());
    }
}
