//! End-to-end experiment: populations, foreground extraction, split,
//! baseline and mixture-trained models, and their evaluation on unmixed,
//! artificially mixed and truly mixed test sets.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! config.toml              resolved configuration
//! data/manifest.jsonl      homogeneous captures (phantom mode)
//! data/true_mixture/       true-mixture test scenes (phantom mode)
//! split.jsonl              captures tagged train / val
//! extracted/               pseudo-label maps of the training captures
//! eval/artificial/         composites of held-out captures
//! models/{baseline,cellmixer}.json
//! overlays/                truth and predictions on true mixtures
//! report.json, report.txt  metrics and comparison
//! sidecar.json             provenance of everything above
//! ```
//!
//! Reports hold no paths or timings, so two runs with the same config are
//! byte-identical.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{write_sidecar, PipelineConfig, SIDECAR_NAME};
use crate::error::{Error, Result};
use crate::foreground::extract_batch;
use crate::imaging::io::load_labels;
use crate::imaging::{Image, LabelMap};
use crate::manifest::{split_manifest, DatasetManifest, ManifestRecord, Split};
use crate::metrics::{
    compare_report, evaluate_model, format_table, load_labelled, Comparison, EvalReport,
};
use crate::mixer::{synthesize_set, MixerConfig, SamplePool};
use crate::overlay::render_overlay;
use crate::phantom::{generate_population, generate_true_mixture, save_phantoms};
use crate::segmenter::{sliding_window_infer, train, PixelClassifier, TrainMode};

pub const UNMIXED: &str = "unmixed";
pub const ARTIFICIAL: &str = "artificial-mixture";
pub const TRUE_MIXTURE: &str = "true-mixture";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSummary {
    pub processed: usize,
    pub failed: usize,
    pub mean_foreground_fraction: BTreeMap<u8, f64>,
    /// Mean mask IoU against the truth, per class, where truth exists.
    pub mean_iou_vs_truth: BTreeMap<u8, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train: BTreeMap<u8, usize>,
    pub val: BTreeMap<u8, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub mode: TrainMode,
    pub iterations: usize,
    /// Mean batch loss over the first and last tenth of training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub extraction: ExtractionSummary,
    pub split: SplitSummary,
    pub training: Vec<TrainingSummary>,
    pub results: Vec<EvalReport>,
    pub comparison: Comparison,
}

impl ExperimentReport {
    pub fn result(&self, model: &str, dataset: &str) -> Option<&EvalReport> {
        self.results
            .iter()
            .find(|r| r.model == model && r.dataset == dataset)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{}\nconfig {}\nseed {}\n\n",
            self.tool_version, self.config_hash, self.seed
        );
        s += "extraction\n";
        for (c, f) in &self.extraction.mean_foreground_fraction {
            s += &format!("  class {c}: foreground {:.3}", f);
            if let Some(iou) = self.extraction.mean_iou_vs_truth.get(c) {
                s += &format!("  IoU vs truth {iou:.3}");
            }
            s += "\n";
        }
        if self.extraction.failed > 0 {
            s += &format!("  failed: {}\n", self.extraction.failed);
        }
        s += "\ntraining\n";
        for t in &self.training {
            s += &format!(
                "  {}: {} iterations, loss {:.4} -> {:.4}\n",
                t.mode, t.iterations, t.initial_loss, t.final_loss
            );
        }
        s += "\n";
        s += &format_table(&self.results);
        s += "\nforeground mIoU\n";
        for d in &self.comparison.datasets {
            let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
            s += &format!(
                "  {:<20} {} {:>7}  {} {:>7}  delta {:>7}  winner {}\n",
                d.dataset,
                d.model_a,
                f(d.foreground_miou_a),
                d.model_b,
                f(d.foreground_miou_b),
                f(d.foreground_miou_delta),
                d.winner.as_deref().unwrap_or("-")
            );
        }
        s
    }
}

/// Renders the homogeneous phantom populations into `dir`, one
/// sub-directory per class, and returns the combined manifest.
pub fn write_phantom_populations(cfg: &PipelineConfig, dir: &Path) -> Result<DatasetManifest> {
    let seeded = cfg.seeded();
    let mut records = Vec::new();
    for class in 1..=3u8 {
        let sub = format!("class{class}");
        let images = generate_population(class, cfg.experiment.images_per_class, &seeded.phantom)?;
        let m = save_phantoms(&images, &dir.join(&sub), "cell", Some(class), Split::Train)?;
        records.extend(m.records.into_iter().map(|r| ManifestRecord {
            image: Path::new(&sub).join(r.image),
            labels: r.labels.map(|l| Path::new(&sub).join(l)),
            ..r
        }));
    }
    let manifest = DatasetManifest::new(dir, records);
    manifest.save(dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

fn subset(manifest: &DatasetManifest, split: Split) -> DatasetManifest {
    DatasetManifest::new(
        manifest.root.clone(),
        manifest.with_split(split).cloned().collect(),
    )
}

fn per_class(manifest: &DatasetManifest, split: Split) -> BTreeMap<u8, usize> {
    let mut out = BTreeMap::new();
    for r in manifest.with_split(split) {
        if let Some(c) = r.class {
            *out.entry(c).or_insert(0) += 1;
        }
    }
    out
}

fn mean_window(trace: &[f64], from_end: bool) -> f64 {
    let finite: Vec<f64> = trace.iter().copied().filter(|v| v.is_finite()).collect();
    let k = (finite.len() / 10).max(1).min(finite.len());
    let part = if from_end {
        &finite[finite.len() - k..]
    } else {
        &finite[..k]
    };
    if part.is_empty() {
        f64::NAN
    } else {
        part.iter().sum::<f64>() / part.len() as f64
    }
}

/// Mean IoU of pseudo-label masks against truth, per class.
fn extraction_iou(
    extracted: &DatasetManifest,
    source: &DatasetManifest,
) -> Result<BTreeMap<u8, f64>> {
    let truth: HashMap<PathBuf, PathBuf> = source
        .records
        .iter()
        .filter_map(|r| Some((source.resolve(&r.image), source.resolve(r.labels.as_ref()?))))
        .collect();
    let scores = extracted
        .records
        .par_iter()
        .filter_map(|r| {
            let t = truth.get(&extracted.resolve(&r.image))?;
            let pseudo = r.labels.as_ref()?;
            Some((r, t, pseudo))
        })
        .map(|(r, t, pseudo)| {
            let t = load_labels(t)?.foreground_mask();
            let p = load_labels(extracted.resolve(pseudo))?.foreground_mask();
            Ok((r.class.unwrap_or(0), p.iou(&t)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sums: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
    for (c, iou) in scores {
        let e = sums.entry(c).or_insert((0.0, 0));
        e.0 += iou;
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(c, (s, n))| (c, s / n as f64))
        .collect())
}

fn rel(out_dir: &Path, p: &Path) -> String {
    p.strip_prefix(out_dir)
        .unwrap_or(p)
        .to_string_lossy()
        .replace('\\', "/")
}

fn files_under(out_dir: &Path, dir: &Path, acc: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            files_under(out_dir, &p, acc)?;
        } else if p.file_name().is_some_and(|n| n != SIDECAR_NAME) {
            acc.push(rel(out_dir, &p));
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs the whole pipeline and writes every artifact into `out_dir`.
pub fn run_experiment(cfg: &PipelineConfig, out_dir: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let seeded = cfg.seeded();
    let stamp = cfg.stamp();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_text(&out_dir.join("config.toml"), &cfg.to_toml()?)?;
    let t0 = Instant::now();

    let (captures, true_mixture) = match (&cfg.experiment.manifest, &cfg.experiment.test_manifest) {
        (Some(m), Some(t)) => (DatasetManifest::load(m)?, DatasetManifest::load(t)?),
        _ => {
            let data = out_dir.join("data");
            let captures = write_phantom_populations(cfg, &data)?;
            let scenes = generate_true_mixture(
                &cfg.experiment.true_mix,
                cfg.experiment.true_mixtures,
                &seeded.phantom,
            )?;
            let mix_dir = data.join("true_mixture");
            let mixture = save_phantoms(&scenes, &mix_dir, "scene", None, Split::Test)?;
            mixture.save(mix_dir.join("manifest.jsonl"))?;
            (captures, mixture)
        }
    };
    info!(
        "data ready: {} captures ({:.1}s)",
        captures.records.len(),
        t0.elapsed().as_secs_f64()
    );

    let split = split_manifest(&captures, cfg.experiment.val_fraction, seeds.split)?;
    let split = DatasetManifest::new(
        split.root.clone(),
        split
            .records
            .into_iter()
            .filter(|r| r.class.is_some_and(|c| c >= 1))
            .collect(),
    );
    split.save(out_dir.join("split.jsonl"))?;
    let split_summary = SplitSummary {
        train: per_class(&split, Split::Train),
        val: per_class(&split, Split::Val),
    };

    let train_set = subset(&split, Split::Train);
    let (extract_report, extracted) =
        extract_batch(&train_set, &cfg.extraction, &out_dir.join("extracted"))?;
    for f in &extract_report.failed {
        warn!("extraction failed for {}: {}", f.image.display(), f.error);
    }
    extracted.save(out_dir.join("extracted").join("manifest.jsonl"))?;
    let extraction = ExtractionSummary {
        processed: extract_report.processed,
        failed: extract_report.failed.len(),
        mean_foreground_fraction: extract_report.mean_foreground_fraction.clone(),
        mean_iou_vs_truth: extraction_iou(&extracted, &train_set)?,
    };
    info!("extraction done ({:.1}s)", t0.elapsed().as_secs_f64());

    let pool = SamplePool::from_manifest(&extracted, None)?;
    let models_dir = out_dir.join("models");
    fs::create_dir_all(&models_dir).map_err(|e| Error::io(&models_dir, e))?;
    let mut models: Vec<(TrainMode, PixelClassifier)> = Vec::new();
    let mut training = Vec::new();
    for mode in [TrainMode::Baseline, TrainMode::Cellmixer] {
        let t = Instant::now();
        let out = train(&pool, &seeded.train, mode, &seeded.mixer)?;
        out.model.save(models_dir.join(format!("{mode}.json")))?;
        training.push(TrainingSummary {
            mode,
            iterations: seeded.train.iterations,
            initial_loss: mean_window(&out.loss_trace, false),
            final_loss: mean_window(&out.loss_trace, true),
        });
        info!("trained {mode} ({:.1}s)", t.elapsed().as_secs_f64());
        models.push((mode, out.model));
    }

    let mut test_sets: Vec<(&str, Vec<(Image, LabelMap)>)> = Vec::new();
    let val = DatasetManifest::new(
        split.root.clone(),
        split
            .with_split(Split::Val)
            .filter(|r| r.labels.is_some())
            .cloned()
            .collect(),
    );
    if val.records.is_empty() {
        warn!("no labelled held-out captures; skipping {UNMIXED} and {ARTIFICIAL} evaluation");
    } else {
        let val_samples = load_labelled(&val, None)?;
        let val_pool = SamplePool::from_manifest(&val, None)?;
        let n_classes = per_class(&val, Split::Val).len();
        test_sets.push((UNMIXED, val_samples));
        if n_classes >= 2 && cfg.experiment.artificial_mixtures > 0 {
            let side = val_pool
                .entries
                .iter()
                .map(|e| e.image.width().min(e.image.height()))
                .min()
                .unwrap_or(0);
            let mixer = MixerConfig {
                crop_size: side,
                seed: seeds.eval_mix,
                ..cfg.mixer.clone()
            };
            let art = synthesize_set(
                &val_pool,
                &mixer,
                cfg.experiment.artificial_mixtures,
                &out_dir.join("eval").join("artificial"),
            )?;
            test_sets.push((ARTIFICIAL, load_labelled(&art, None)?));
        }
    }
    let true_samples = load_labelled(&true_mixture, None)?;
    test_sets.push((TRUE_MIXTURE, true_samples));

    let mut results = Vec::new();
    for (mode, model) in &models {
        for (name, samples) in &test_sets {
            if !samples.is_empty() {
                results.push(evaluate_model(
                    model,
                    &mode.to_string(),
                    name,
                    samples,
                    &cfg.eval,
                )?);
            }
        }
    }
    info!("evaluation done ({:.1}s)", t0.elapsed().as_secs_f64());
    let by_mode = |m: TrainMode| {
        results
            .iter()
            .filter(|r| r.model == m.to_string())
            .cloned()
            .collect::<Vec<_>>()
    };
    let comparison = compare_report(
        &by_mode(TrainMode::Baseline),
        &by_mode(TrainMode::Cellmixer),
    )?;

    let overlays = out_dir.join("overlays");
    fs::create_dir_all(&overlays).map_err(|e| Error::io(&overlays, e))?;
    let scenes = &test_sets.last().expect("true mixtures present").1;
    for (i, (img, truth)) in scenes.iter().take(cfg.experiment.overlays).enumerate() {
        render_overlay(img, truth, overlays.join(format!("scene_{i:03}_truth.png")))?;
        for (mode, model) in &models {
            let pred = sliding_window_infer(model, img, cfg.eval.window, cfg.eval.stride)?;
            render_overlay(
                img,
                &pred,
                overlays.join(format!("scene_{i:03}_{mode}.png")),
            )?;
        }
    }

    let report = ExperimentReport {
        tool_version: stamp.tool_version.clone(),
        config_hash: stamp.config_hash.clone(),
        seed: stamp.seed,
        extraction,
        split: split_summary,
        training,
        results,
        comparison,
    };
    write_text(
        &out_dir.join("report.json"),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )?;
    write_text(&out_dir.join("report.txt"), &report.to_text())?;

    let mut artifacts = Vec::new();
    files_under(out_dir, out_dir, &mut artifacts)?;
    write_sidecar(&out_dir.join(SIDECAR_NAME), &stamp, artifacts)?;
    info!("experiment finished ({:.1}s)", t0.elapsed().as_secs_f64());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_windows_skip_nan() {
        let trace = [4.0, f64::NAN, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 1.0];
        assert_eq!(mean_window(&trace, false), 4.0);
        assert_eq!(mean_window(&trace, true), 1.0);
        assert!(mean_window(&[f64::NAN], true).is_nan());
    }

    #[test]
    fn phantom_populations_share_one_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.experiment.images_per_class = 2;
        cfg.phantom.image_size = 48;
        cfg.phantom.cells_per_image = (2, 3);
        let m = write_phantom_populations(&cfg, dir.path()).unwrap();
        assert_eq!(m.records.len(), 6);
        let back = DatasetManifest::load(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(back.records, m.records);
        for r in &back.records {
            assert!(back.resolve(&r.image).exists());
            assert!(r.image.is_relative());
        }
        assert_eq!(
            back.class_counts().values().copied().collect::<Vec<_>>(),
            vec![2, 2, 2]
        );
    }
}
