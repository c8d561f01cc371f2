//! Global (Otsu) and local-mean thresholding of gradient fields.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::filter::BoxStats;
use super::raster::{BinaryMask, GradientField, Image};
use crate::error::{ensure_param, Error, Result};

/// Histogram of a field over `[min, max]` with equal-width bins.
#[derive(Debug, Clone)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<u64>,
    /// Sum of the raw values that fell in each bin.
    pub sums: Vec<f64>,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        (self.max - self.min) / self.counts.len() as f64
    }

    /// Lower edge of bin `k`; `k == bins` gives `max`.
    pub fn edge(&self, k: usize) -> f64 {
        self.min + k as f64 * self.bin_width()
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let bins = self.counts.len();
        let t = ((v - self.min) / (self.max - self.min) * bins as f64).floor();
        (t.max(0.0) as usize).min(bins - 1)
    }
}

pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    ensure_param(bins >= 2, || format!("need at least 2 bins, got {bins}"))?;
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if values.is_empty() || max.partial_cmp(&min) != Some(Ordering::Greater) {
        return Err(Error::DegenerateInput(
            "thresholding needs at least two distinct values".into(),
        ));
    }
    let mut h = Histogram {
        min,
        max,
        counts: vec![0; bins],
        sums: vec![0.0; bins],
    };
    for &v in values {
        let b = h.bin_of(v);
        h.counts[b] += 1;
        h.sums[b] += v;
    }
    Ok(h)
}

/// Index `k` in `1..bins` of the bin edge maximizing the between-class
/// variance `w0 * w1 * (mu0 - mu1)^2`, where class 0 holds bins `< k`.
/// The lowest maximizing edge wins ties.
pub fn otsu_bin(h: &Histogram) -> usize {
    let total_n: u64 = h.counts.iter().sum();
    let total_s: f64 = h.sums.iter().sum();
    let n = total_n as f64;
    let (mut n0, mut s0) = (0u64, 0.0);
    let (mut best_k, mut best) = (1, f64::NEG_INFINITY);
    for k in 1..h.counts.len() {
        n0 += h.counts[k - 1];
        s0 += h.sums[k - 1];
        let n1 = total_n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let (w0, w1) = (n0 as f64 / n, n1 as f64 / n);
        let mu0 = s0 / n0 as f64;
        let mu1 = (total_s - s0) / n1 as f64;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best {
            best = between;
            best_k = k;
        }
    }
    best_k
}

/// Otsu threshold of a field: values `>= threshold` are foreground.
pub fn otsu_threshold(field: &GradientField, bins: usize) -> Result<f64> {
    let h = histogram(field.as_slice(), bins)?;
    Ok(h.edge(otsu_bin(&h)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdMode {
    Otsu {
        bins: usize,
    },
    /// Foreground where the value exceeds the local box mean by `offset`.
    LocalMean {
        window: usize,
        offset: f64,
    },
}

impl Default for ThresholdMode {
    fn default() -> Self {
        ThresholdMode::Otsu { bins: 256 }
    }
}

pub fn threshold_field(field: &GradientField, mode: ThresholdMode) -> Result<BinaryMask> {
    let (w, h) = field.shape();
    let data = match mode {
        ThresholdMode::Otsu { bins } => {
            let t = otsu_threshold(field, bins)?;
            field.as_slice().iter().map(|&v| v >= t).collect()
        }
        ThresholdMode::LocalMean { window, offset } => {
            ensure_param(window >= 3, || {
                format!("local window must be >= 3, got {window}")
            })?;
            let (lo, hi) = field
                .as_slice()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                    (a.min(v), b.max(v))
                });
            if hi.partial_cmp(&lo) != Some(Ordering::Greater) {
                return Err(Error::DegenerateInput(
                    "thresholding needs at least two distinct values".into(),
                ));
            }
            let radius = window / 2;
            let stats = BoxStats::new(field.as_slice(), w, h, radius);
            (0..w * h)
                .map(|i| {
                    let (mean, _) = stats.mean_std(i % w, i / w, radius);
                    field.as_slice()[i] > mean + offset
                })
                .collect()
        }
    };
    BinaryMask::new(w, h, data)
}

/// Population mean and standard deviation of pixels where `fg` is false.
pub fn background_stats(img: &Image, fg: &BinaryMask) -> Result<(f64, f64)> {
    img.check_same_shape(fg.shape())?;
    let values = img
        .as_slice()
        .iter()
        .zip(fg.as_slice())
        .filter(|(_, &f)| !f)
        .map(|(&v, _)| v);
    mean_std(values)
}

pub(crate) fn mean_std(values: impl Iterator<Item = f64> + Clone) -> Result<(f64, f64)> {
    let (n, sum) = values
        .clone()
        .fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "need at least 2 background pixels, got {n}"
        )));
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Ok((mean, var.sqrt()))
}
