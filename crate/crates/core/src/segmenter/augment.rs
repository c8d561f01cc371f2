//! Random photometric and geometric augmentation of training crops.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_param, Result};
use crate::imaging::{gaussian_smooth, Image, LabelMap};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Chance that each enabled augmentation fires.
    pub probability: f64,
    pub flip: bool,
    pub blur: bool,
    pub blur_sigma: (f64, f64),
    pub noise: bool,
    pub noise_sigma: (f64, f64),
    pub brightness: bool,
    pub brightness_delta: (f64, f64),
    pub contrast: bool,
    pub contrast_factor: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            flip: true,
            blur: true,
            blur_sigma: (0.3, 1.0),
            noise: true,
            noise_sigma: (0.005, 0.03),
            brightness: true,
            brightness_delta: (-0.1, 0.1),
            contrast: true,
            contrast_factor: (0.6, 2.2),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            flip: false,
            blur: false,
            noise: false,
            brightness: false,
            contrast: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_param((0.0..=1.0).contains(&self.probability), || {
            "augmentation probability must lie in [0, 1]".into()
        })?;
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        ensure_param(
            ordered(self.blur_sigma)
                && ordered(self.noise_sigma)
                && ordered(self.brightness_delta)
                && ordered(self.contrast_factor),
            || "augmentation ranges must be finite with lo <= hi".into(),
        )?;
        ensure_param(self.blur_sigma.0 > 0.0, || {
            "blur sigma must be positive".into()
        })?;
        ensure_param(self.noise_sigma.0 >= 0.0, || {
            "noise sigma must be non-negative".into()
        })?;
        ensure_param(self.contrast_factor.0 >= 0.0, || {
            "contrast factor must be non-negative".into()
        })
    }
}

fn draw(rng: &mut StreamRng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Applies each enabled augmentation independently with `cfg.probability`.
/// Only flips touch the labels.
pub fn augment(
    img: &Image,
    labels: &LabelMap,
    cfg: &AugmentConfig,
    rng: &mut StreamRng,
) -> Result<(Image, LabelMap)> {
    img.check_same_shape(labels.shape())?;
    cfg.validate()?;
    let p = cfg.probability;
    let mut img = img.clone();
    let mut labels = labels.clone();

    if cfg.flip {
        if rng.random_bool(p) {
            img = img.flip_horizontal();
            labels = labels.flip_horizontal();
        }
        if rng.random_bool(p) {
            img = img.flip_vertical();
            labels = labels.flip_vertical();
        }
    }
    if cfg.blur && rng.random_bool(p) {
        let sigma = draw(rng, cfg.blur_sigma);
        img = gaussian_smooth(&img, sigma, (3.0 * sigma).ceil().max(1.0) as usize)?;
    }
    let (w, h) = img.shape();
    if cfg.noise && rng.random_bool(p) {
        let sigma = draw(rng, cfg.noise_sigma);
        let normal = Normal::new(0.0, sigma).expect("validated sigma");
        let data = img
            .as_slice()
            .iter()
            .map(|v| v + normal.sample(rng))
            .collect();
        img = Image::from_clamped(w, h, data)?;
    }
    if cfg.brightness && rng.random_bool(p) {
        let delta = draw(rng, cfg.brightness_delta);
        let data = img.as_slice().iter().map(|v| v + delta).collect();
        img = Image::from_clamped(w, h, data)?;
    }
    if cfg.contrast && rng.random_bool(p) {
        let factor = draw(rng, cfg.contrast_factor);
        let mean = img.as_slice().iter().sum::<f64>() / img.len() as f64;
        let data = img
            .as_slice()
            .iter()
            .map(|v| (v - mean) * factor + mean)
            .collect();
        img = Image::from_clamped(w, h, data)?;
    }
    Ok((img, labels))
}
