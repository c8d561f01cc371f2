//! Unsupervised foreground extraction from gradient structure.
//!
//! Pipeline: Gaussian smoothing, Sobel magnitude, smoothing again, grey-level
//! erosion, thresholding, then binary cleanup (closing, hole filling and
//! removal of small components). The image-level class is then stamped onto
//! the resulting foreground.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_param, Error, Result};
use crate::imaging::io::{load_image, save_labels};
use crate::imaging::{
    close_mask, erode, fill_holes, gaussian_smooth, remove_small_components, smooth_field,
    sobel_gradient_magnitude, threshold_field, BinaryMask, ElementShape, Image, LabelMap,
    ThresholdMode, N_CLASSES,
};
use crate::manifest::{DatasetManifest, ManifestRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub sigma_pre: f64,
    pub sigma_post: f64,
    /// Truncation radius of both smoothing kernels.
    pub smooth_radius: usize,
    pub erosion_element: ElementShape,
    pub erosion_rounds: usize,
    pub threshold_mode: ThresholdMode,
    pub close_radius: usize,
    pub min_component_area: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            sigma_pre: 1.0,
            sigma_post: 1.0,
            smooth_radius: 2,
            erosion_element: ElementShape::Square(1),
            erosion_rounds: 1,
            threshold_mode: ThresholdMode::default(),
            close_radius: 2,
            min_component_area: 30,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_param(self.sigma_pre > 0.0 && self.sigma_post > 0.0, || {
            "smoothing sigmas must be positive".into()
        })?;
        ensure_param(self.smooth_radius >= 1, || {
            "smooth_radius must be >= 1".into()
        })?;
        match self.threshold_mode {
            ThresholdMode::Otsu { bins } => {
                ensure_param(bins >= 2, || "otsu bins must be >= 2".into())
            }
            ThresholdMode::LocalMean { window, .. } => {
                ensure_param(window >= 3, || "local window must be >= 3".into())
            }
        }
    }
}

/// Foreground mask of a homogeneous-population image.
pub fn extract_foreground(img: &Image, cfg: &ExtractionConfig) -> Result<BinaryMask> {
    cfg.validate()?;
    let smoothed = gaussian_smooth(img, cfg.sigma_pre, cfg.smooth_radius)?;
    let gradient = sobel_gradient_magnitude(&smoothed)?;
    let mut field = smooth_field(&gradient, cfg.sigma_post, cfg.smooth_radius)?;
    let element = cfg.erosion_element.build();
    for _ in 0..cfg.erosion_rounds {
        field = erode(&field, &element);
    }
    let edges = threshold_field(&field, cfg.threshold_mode)?;
    let closed = close_mask(&edges, cfg.close_radius);
    let filled = fill_holes(&closed);
    Ok(remove_small_components(&filled, cfg.min_component_area))
}

/// Class `class_index` on the foreground, background elsewhere.
pub fn assign_label(fg: &BinaryMask, class_index: u8) -> Result<LabelMap> {
    ensure_param((1..=N_CLASSES as u8).contains(&class_index), || {
        format!("class index must be in 1..={N_CLASSES}, got {class_index}")
    })?;
    let data = fg
        .as_slice()
        .iter()
        .map(|&f| if f { class_index } else { 0 })
        .collect();
    LabelMap::new(fg.width(), fg.height(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRecord {
    pub image: PathBuf,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractReport {
    pub processed: usize,
    pub failed: Vec<FailedRecord>,
    /// Mean foreground fraction per class, keyed by class index.
    pub mean_foreground_fraction: BTreeMap<u8, f64>,
}

fn label_file_name(image: &Path, index: usize) -> PathBuf {
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    PathBuf::from(format!("{index:05}_{stem}_labels.png"))
}

/// Runs extraction over every record, writing one label PNG per success
/// into `out_dir` and returning the report together with a manifest of the
/// outputs (image paths resolved, label paths relative to `out_dir`).
pub fn extract_batch(
    manifest: &DatasetManifest,
    cfg: &ExtractionConfig,
    out_dir: &Path,
) -> Result<(ExtractReport, DatasetManifest)> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results: Vec<std::result::Result<(ManifestRecord, u8, f64), FailedRecord>> = manifest
        .records
        .par_iter()
        .enumerate()
        .map(|(i, record)| {
            let fail = |e: Error| FailedRecord {
                image: record.image.clone(),
                error: e.to_string(),
            };
            let class = match record.class {
                Some(c) if c >= 1 => c,
                _ => {
                    return Err(fail(Error::InvalidParameter(
                        "record has no cell class".into(),
                    )))
                }
            };
            let image_path = std::path::absolute(manifest.resolve(&record.image))
                .map_err(|e| fail(Error::io(&record.image, e)))?;
            let img = load_image(&image_path).map_err(fail)?;
            let fg = extract_foreground(&img, cfg).map_err(fail)?;
            let labels = assign_label(&fg, class).map_err(fail)?;
            let name = label_file_name(&record.image, i);
            save_labels(&labels, out_dir.join(&name)).map_err(fail)?;
            let fraction = fg.count_true() as f64 / fg.len() as f64;
            Ok((
                ManifestRecord {
                    image: image_path,
                    labels: Some(name),
                    class: Some(class),
                    split: record.split,
                },
                class,
                fraction,
            ))
        })
        .collect();

    let mut records = Vec::new();
    let mut failed = Vec::new();
    let mut sums: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
    for r in results {
        match r {
            Ok((record, class, fraction)) => {
                let e = sums.entry(class).or_insert((0.0, 0));
                e.0 += fraction;
                e.1 += 1;
                records.push(record);
            }
            Err(f) => {
                log::warn!("extraction failed for {}: {}", f.image.display(), f.error);
                failed.push(f);
            }
        }
    }
    let report = ExtractReport {
        processed: records.len(),
        failed,
        mean_foreground_fraction: sums
            .into_iter()
            .map(|(c, (s, n))| (c, s / n as f64))
            .collect(),
    };
    Ok((report, DatasetManifest::new(out_dir, records)))
}
