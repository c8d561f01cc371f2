//! Multinomial linear classifier over standardized pixel features.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::{FeatureSpec, FeatureTables};
use crate::error::{ensure_param, Error, Result};
use crate::imaging::{Image, LabelMap, N_CLASSES, N_OUTPUTS};

pub const MODEL_FORMAT: &str = "cellmixer-pixel-classifier";
pub const MODEL_VERSION: u32 = 1;

/// Per-pixel softmax over background and the cell classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    /// `data[p * N_OUTPUTS + k]`
    data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        ensure_param(data.len() == width * height * N_OUTPUTS, || {
            format!(
                "probability map {width}x{height} needs {} values",
                width * height * N_OUTPUTS
            )
        })?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * N_OUTPUTS..(index + 1) * N_OUTPUTS]
    }

    /// Most probable class per pixel; ties go to the lower class index.
    pub fn argmax(&self) -> LabelMap {
        let data = self
            .data
            .chunks(N_OUTPUTS)
            .map(|p| argmax(p) as u8)
            .collect();
        LabelMap::new(self.width, self.height, data).expect("argmax yields legal labels")
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..p.len() {
        if p[k] > p[best] {
            best = k;
        }
    }
    best
}

/// Numerically stable softmax in place.
pub(crate) fn softmax(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    scores.iter_mut().for_each(|s| *s /= sum);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelClassifier {
    pub feature_spec: FeatureSpec,
    pub n_classes: usize,
    /// Standardization applied to raw features before the linear map.
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    /// Row-major `[N_OUTPUTS][n_features + 1]`, bias last.
    pub weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    weight_rows: usize,
    weight_cols: usize,
    #[serde(flatten)]
    model: PixelClassifier,
}

impl PixelClassifier {
    /// Zero weights with identity standardization.
    pub fn zeros(feature_spec: FeatureSpec) -> Self {
        let n = feature_spec.n_features();
        Self {
            feature_spec,
            n_classes: N_CLASSES,
            feature_mean: vec![0.0; n],
            feature_scale: vec![1.0; n],
            weights: vec![0.0; N_OUTPUTS * (n + 1)],
        }
    }

    pub fn n_features(&self) -> usize {
        self.feature_spec.n_features()
    }

    pub fn cols(&self) -> usize {
        self.n_features() + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_spec.validate()?;
        let n = self.n_features();
        ensure_param(self.n_classes == N_CLASSES, || {
            format!("model has {} classes, expected {N_CLASSES}", self.n_classes)
        })?;
        ensure_param(
            self.feature_mean.len() == n && self.feature_scale.len() == n,
            || "standardization vectors do not match the feature spec".into(),
        )?;
        ensure_param(self.weights.len() == N_OUTPUTS * (n + 1), || {
            "weight matrix does not match the feature spec".into()
        })?;
        ensure_param(
            self.weights
                .iter()
                .chain(&self.feature_mean)
                .all(|v| v.is_finite())
                && self.feature_scale.iter().all(|v| v.is_finite() && *v > 0.0),
            || "model parameters must be finite".into(),
        )
    }

    /// Standardizes raw features in place.
    pub(crate) fn standardize(&self, features: &mut [f64]) {
        for (j, v) in features.iter_mut().enumerate() {
            *v = (*v - self.feature_mean[j]) / self.feature_scale[j];
        }
    }

    /// Linear scores for standardized features.
    pub(crate) fn scores(&self, features: &[f64], out: &mut [f64]) {
        let cols = self.cols();
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.weights[k * cols..(k + 1) * cols];
            let dot: f64 = row[..cols - 1]
                .iter()
                .zip(features)
                .map(|(w, f)| w * f)
                .sum();
            *o = dot + row[cols - 1];
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            weight_rows: N_OUTPUTS,
            weight_cols: self.cols(),
            model: self.clone(),
        };
        let text = serde_json::to_string_pretty(&file)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::InvalidParameter(format!(
                "{}: unsupported model format {} v{}",
                path.display(),
                file.format,
                file.version
            )));
        }
        let model = file.model;
        ensure_param(
            file.weight_rows == N_OUTPUTS && file.weight_cols == model.cols(),
            || "model header dimensions disagree with its weights".into(),
        )?;
        model.validate()?;
        Ok(model)
    }
}

/// Per-pixel class probabilities for a whole image.
pub fn forward(model: &PixelClassifier, img: &Image) -> Result<ProbabilityMap> {
    model.validate()?;
    let tables = FeatureTables::new(img, &model.feature_spec);
    let n = model.n_features();
    let mut feats = vec![0.0; n];
    let mut data = vec![0.0; img.len() * N_OUTPUTS];
    for (i, out) in data.chunks_mut(N_OUTPUTS).enumerate() {
        tables.write(i, &mut feats);
        model.standardize(&mut feats);
        model.scores(&feats, out);
        softmax(out);
    }
    ProbabilityMap::new(img.width(), img.height(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_model(seed_weights: &[f64]) -> PixelClassifier {
        let mut m = PixelClassifier::zeros(FeatureSpec { radii: vec![1, 2] });
        for (w, s) in m.weights.iter_mut().zip(seed_weights.iter().cycle()) {
            *w = *s;
        }
        m
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = PixelClassifier::zeros(FeatureSpec::default());
        let p = forward(&m, &Image::filled(8, 8, 0.3).unwrap()).unwrap();
        assert!(p.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        assert!(p.argmax().as_slice().iter().all(|&v| v == 0));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = random_model(&[0.1, -2.5, 1.0 / 3.0, 1e-17]);
        m.save(&path).unwrap();
        assert_eq!(PixelClassifier::load(&path).unwrap(), m);

        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 9");
        fs::write(&path, text).unwrap();
        assert!(PixelClassifier::load(&path).is_err());
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(
            weights in proptest::collection::vec(-50.0f64..50.0, 1..40),
            pixels in proptest::collection::vec(0.0f64..=1.0, 36),
        ) {
            let m = random_model(&weights);
            let p = forward(&m, &Image::new(6, 6, pixels).unwrap()).unwrap();
            for px in p.as_slice().chunks(N_OUTPUTS) {
                prop_assert!(px.iter().all(|&v| v >= 0.0));
                prop_assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }
}
