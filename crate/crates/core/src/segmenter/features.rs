//! Handcrafted per-pixel features.
//!
//! For every pixel: raw intensity, Sobel magnitude, and for each configured
//! radius the box mean and standard deviation of the intensity plus the box
//! mean of the Sobel magnitude. Borders replicate edge pixels.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_param, Result};
use crate::imaging::filter::{sobel_magnitude_raw, BoxStats};
use crate::imaging::Image;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub radii: Vec<usize>,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            radii: vec![1, 2, 4, 8, 16, 32],
        }
    }
}

impl FeatureSpec {
    pub fn n_features(&self) -> usize {
        2 + 3 * self.radii.len()
    }

    pub fn max_radius(&self) -> usize {
        self.radii.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_param(self.radii.iter().all(|&r| r >= 1), || {
            "feature radii must be >= 1".into()
        })
    }

    /// Feature names in storage order.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["intensity".to_string(), "sobel".to_string()];
        for r in &self.radii {
            names.push(format!("mean_r{r}"));
            names.push(format!("std_r{r}"));
            names.push(format!("sobel_mean_r{r}"));
        }
        names
    }
}

/// Pixel-major feature vectors: `data[p * n_features + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub n_features: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.n_features..(index + 1) * self.n_features]
    }
}

/// Precomputed tables from which features at any pixel are O(1).
pub(crate) struct FeatureTables<'a> {
    spec: &'a FeatureSpec,
    width: usize,
    intensity: &'a [f64],
    sobel: Vec<f64>,
    intensity_stats: BoxStats,
    sobel_stats: BoxStats,
}

impl<'a> FeatureTables<'a> {
    pub(crate) fn new(img: &'a Image, spec: &'a FeatureSpec) -> Self {
        let (w, h) = img.shape();
        let pad = spec.max_radius();
        let sobel = sobel_magnitude_raw(img.as_slice(), w, h);
        Self {
            spec,
            width: w,
            intensity: img.as_slice(),
            intensity_stats: BoxStats::new(img.as_slice(), w, h, pad),
            sobel_stats: BoxStats::new(&sobel, w, h, pad),
            sobel,
        }
    }

    pub(crate) fn write(&self, index: usize, out: &mut [f64]) {
        let (x, y) = (index % self.width, index / self.width);
        out[0] = self.intensity[index];
        out[1] = self.sobel[index];
        for (k, &r) in self.spec.radii.iter().enumerate() {
            let (mean, std) = self.intensity_stats.mean_std(x, y, r);
            let (g_mean, _) = self.sobel_stats.mean_std(x, y, r);
            out[2 + 3 * k] = mean;
            out[3 + 3 * k] = std;
            out[4 + 3 * k] = g_mean;
        }
    }
}

pub fn featurize(img: &Image, spec: &FeatureSpec) -> Result<FeatureMap> {
    spec.validate()?;
    let tables = FeatureTables::new(img, spec);
    let n = spec.n_features();
    let mut data = vec![0.0; img.len() * n];
    for (i, chunk) in data.chunks_mut(n).enumerate() {
        tables.write(i, chunk);
    }
    Ok(FeatureMap {
        width: img.width(),
        height: img.height(),
        n_features: n,
        data,
    })
}

/// Features at selected pixel indices only, in the given order.
pub fn featurize_at(img: &Image, spec: &FeatureSpec, indices: &[usize]) -> Result<Vec<f64>> {
    spec.validate()?;
    let tables = FeatureTables::new(img, spec);
    let n = spec.n_features();
    let mut data = vec![0.0; indices.len() * n];
    for (chunk, &i) in data.chunks_mut(n).zip(indices) {
        tables.write(i, chunk);
    }
    Ok(data)
}
