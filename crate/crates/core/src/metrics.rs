//! Per-class accuracy and IoU from pixel confusion counts, evaluation of a
//! model over a dataset, and side-by-side comparison of two models.
//!
//! Percentages throughout. A class with neither truth nor predicted pixels is
//! absent and left out of every mean.

use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_param, Error, Result};
use crate::imaging::io::{load_image, load_labels};
use crate::imaging::{Image, LabelMap, IGNORE_LABEL, N_OUTPUTS};
use crate::manifest::{DatasetManifest, Split};
use crate::segmenter::{sliding_window_infer, PixelClassifier};

/// Row/column names in reports, background first.
pub const CLASS_NAMES: [&str; N_OUTPUTS] = ["background", "class1", "class2", "class3"];

/// Rows are truth, columns are predictions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_OUTPUTS]; N_OUTPUTS],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pair(truth: &LabelMap, pred: &LabelMap) -> Result<Self> {
        let mut cm = Self::new();
        cm.accumulate(truth, pred)?;
        Ok(cm)
    }

    /// Adds every pixel whose truth is not ignore.
    pub fn accumulate(&mut self, truth: &LabelMap, pred: &LabelMap) -> Result<()> {
        truth.check_same_shape(pred.shape())?;
        ensure_param(!pred.contains_ignore(), || {
            "predictions must not contain the ignore label".into()
        })?;
        for (&t, &p) in truth.as_slice().iter().zip(pred.as_slice()) {
            if t != IGNORE_LABEL {
                self.counts[t as usize][p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn truth_total(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn pred_total(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccuracyConvention {
    /// Diagonal over the truth row.
    #[default]
    Recall,
    /// Diagonal over the prediction column.
    Precision,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// One confusion matrix over all pixels of all images.
    #[default]
    Pooled,
    /// Metrics per image, then averaged per class over images where present.
    PerImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u8,
    /// `None` when the class is absent.
    pub accuracy: Option<f64>,
    pub iou: Option<f64>,
}

/// Accuracy and IoU for each output class. A class seen only in the
/// predictions gets accuracy 0 under the recall convention.
pub fn per_class_metrics(
    cm: &ConfusionMatrix,
    convention: AccuracyConvention,
) -> Result<Vec<ClassMetrics>> {
    if cm.total() == 0 {
        return Err(Error::DegenerateInput("confusion matrix is empty".into()));
    }
    Ok((0..N_OUTPUTS)
        .map(|c| {
            let tp = cm.counts[c][c] as f64;
            let truth = cm.truth_total(c) as f64;
            let pred = cm.pred_total(c) as f64;
            if truth == 0.0 && pred == 0.0 {
                return ClassMetrics {
                    class: c as u8,
                    accuracy: None,
                    iou: None,
                };
            }
            let denom = match convention {
                AccuracyConvention::Recall => truth,
                AccuracyConvention::Precision => pred,
            };
            let accuracy = if denom > 0.0 { 100.0 * tp / denom } else { 0.0 };
            ClassMetrics {
                class: c as u8,
                accuracy: Some(accuracy),
                iou: Some(100.0 * tp / (truth + pred - tp)),
            }
        })
        .collect())
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    /// Sliding-window size; matches the training crop size.
    pub window: usize,
    pub stride: usize,
    pub convention: AccuracyConvention,
    pub aggregation: Aggregation,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self::new(128, 64)
    }
}

impl EvalSettings {
    pub fn new(window: usize, stride: usize) -> Self {
        Self {
            window,
            stride,
            convention: AccuracyConvention::default(),
            aggregation: Aggregation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_param(
            self.window >= 1 && self.stride >= 1 && self.stride <= self.window,
            || {
                format!(
                    "eval window {} / stride {} invalid: need 1 <= stride <= window",
                    self.window, self.stride
                )
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub model: String,
    pub n_images: usize,
    pub convention: AccuracyConvention,
    pub aggregation: Aggregation,
    pub per_class: Vec<ClassMetrics>,
    pub mean_accuracy: Option<f64>,
    pub mean_iou: Option<f64>,
    /// Means over the cell classes only.
    pub foreground_mean_accuracy: Option<f64>,
    pub foreground_mean_iou: Option<f64>,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn class(&self, c: u8) -> &ClassMetrics {
        &self.per_class[c as usize]
    }
}

/// Scores already-computed predictions.
pub fn evaluate_predictions(
    dataset: &str,
    model: &str,
    pairs: &[(LabelMap, LabelMap)],
    convention: AccuracyConvention,
    aggregation: Aggregation,
) -> Result<EvalReport> {
    ensure_param(!pairs.is_empty(), || {
        format!("dataset {dataset} has no images")
    })?;
    let matrices = pairs
        .par_iter()
        .map(|(t, p)| ConfusionMatrix::from_pair(t, p))
        .collect::<Result<Vec<_>>>()?;
    let mut pooled = ConfusionMatrix::new();
    matrices.iter().for_each(|m| pooled.merge(m));

    let per_class = match aggregation {
        Aggregation::Pooled => per_class_metrics(&pooled, convention)?,
        Aggregation::PerImage => {
            let per_image = matrices
                .iter()
                .filter(|m| m.total() > 0)
                .map(|m| per_class_metrics(m, convention))
                .collect::<Result<Vec<_>>>()?;
            if per_image.is_empty() {
                return Err(Error::DegenerateInput(format!(
                    "dataset {dataset} has no scored pixels"
                )));
            }
            (0..N_OUTPUTS)
                .map(|c| ClassMetrics {
                    class: c as u8,
                    accuracy: mean_of(per_image.iter().map(|m| m[c].accuracy)),
                    iou: mean_of(per_image.iter().map(|m| m[c].iou)),
                })
                .collect()
        }
    };
    Ok(EvalReport {
        dataset: dataset.into(),
        model: model.into(),
        n_images: pairs.len(),
        convention,
        aggregation,
        mean_accuracy: mean_of(per_class.iter().map(|m| m.accuracy)),
        mean_iou: mean_of(per_class.iter().map(|m| m.iou)),
        foreground_mean_accuracy: mean_of(per_class[1..].iter().map(|m| m.accuracy)),
        foreground_mean_iou: mean_of(per_class[1..].iter().map(|m| m.iou)),
        per_class,
        confusion: pooled,
    })
}

/// Runs sliding-window inference on every image and scores it.
pub fn evaluate_model(
    model: &PixelClassifier,
    model_name: &str,
    dataset: &str,
    samples: &[(Image, LabelMap)],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let pairs = samples
        .par_iter()
        .map(|(img, truth)| {
            Ok((
                truth.clone(),
                sliding_window_infer(model, img, settings.window, settings.stride)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(
        dataset,
        model_name,
        &pairs,
        settings.convention,
        settings.aggregation,
    )
}

/// Loads the labelled records of a manifest (optionally one split).
pub fn load_labelled(
    manifest: &DatasetManifest,
    split: Option<Split>,
) -> Result<Vec<(Image, LabelMap)>> {
    manifest
        .records
        .par_iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .map(|r| {
            let labels: &PathBuf = r.labels.as_ref().ok_or_else(|| {
                Error::InvalidParameter(format!("{}: record has no label map", r.image.display()))
            })?;
            Ok((
                load_image(manifest.resolve(&r.image))?,
                load_labels(manifest.resolve(labels))?,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub class: u8,
    pub iou_a: Option<f64>,
    pub iou_b: Option<f64>,
    /// `b - a` in IoU points.
    pub iou_delta: Option<f64>,
    pub accuracy_delta: Option<f64>,
    pub winner: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetComparison {
    pub dataset: String,
    pub model_a: String,
    pub model_b: String,
    pub classes: Vec<ClassDelta>,
    pub foreground_miou_a: Option<f64>,
    pub foreground_miou_b: Option<f64>,
    pub foreground_miou_delta: Option<f64>,
    pub winner: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub datasets: Vec<DatasetComparison>,
}

fn winner(a: Option<f64>, b: Option<f64>, name_a: &str, name_b: &str) -> Option<String> {
    let (a, b) = (a?, b?);
    Some(if b > a {
        name_b.to_string()
    } else if a > b {
        name_a.to_string()
    } else {
        "tie".to_string()
    })
}

/// Pairs reports of two models by dataset name (order of `a`).
pub fn compare_report(a: &[EvalReport], b: &[EvalReport]) -> Result<Comparison> {
    let datasets = a
        .iter()
        .map(|ra| {
            let rb = b
                .iter()
                .find(|rb| rb.dataset == ra.dataset)
                .ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "dataset {} missing from second report",
                        ra.dataset
                    ))
                })?;
            let classes = ra
                .per_class
                .iter()
                .zip(&rb.per_class)
                .map(|(ca, cb)| ClassDelta {
                    class: ca.class,
                    iou_a: ca.iou,
                    iou_b: cb.iou,
                    iou_delta: ca.iou.zip(cb.iou).map(|(x, y)| y - x),
                    accuracy_delta: ca.accuracy.zip(cb.accuracy).map(|(x, y)| y - x),
                    winner: winner(ca.iou, cb.iou, &ra.model, &rb.model),
                })
                .collect();
            Ok(DatasetComparison {
                dataset: ra.dataset.clone(),
                model_a: ra.model.clone(),
                model_b: rb.model.clone(),
                classes,
                foreground_miou_a: ra.foreground_mean_iou,
                foreground_miou_b: rb.foreground_mean_iou,
                foreground_miou_delta: ra
                    .foreground_mean_iou
                    .zip(rb.foreground_mean_iou)
                    .map(|(x, y)| y - x),
                winner: winner(
                    ra.foreground_mean_iou,
                    rb.foreground_mean_iou,
                    &ra.model,
                    &rb.model,
                ),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison { datasets })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

/// Aligned plain-text table: one row per report, accuracy and IoU per class,
/// then the foreground means.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut header = vec!["model".to_string(), "dataset".to_string()];
    for name in CLASS_NAMES {
        header.push(format!("{name} acc"));
        header.push(format!("{name} iou"));
    }
    header.push("fg mAcc".into());
    header.push("fg mIoU".into());

    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.model.clone(), r.dataset.clone()];
            for m in &r.per_class {
                row.push(cell(m.accuracy));
                row.push(cell(m.iou));
            }
            row.push(cell(r.foreground_mean_accuracy));
            row.push(cell(r.foreground_mean_iou));
            row
        })
        .collect();

    let widths: Vec<usize> = (0..header.len())
        .map(|j| {
            rows.iter()
                .map(|r| r[j].len())
                .chain([header[j].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&rows) {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (v, &w))| {
                if j < 2 {
                    format!("{v:<w$}")
                } else {
                    format!("{v:>w$}")
                }
            })
            .collect();
        writeln!(out, "{}", line.join("  ").trim_end()).expect("writing to a String");
    }
    out
}
