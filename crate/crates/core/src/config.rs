//! Pipeline configuration.
//!
//! A single TOML document with one table per stage and a global seed:
//!
//! ```toml
//! seed = 7
//!
//! [train]
//! iterations = 500
//!
//! [experiment]
//! images_per_class = 40
//! ```
//!
//! Missing keys take their defaults. Dotted `section.key=value` overrides are
//! applied on top of the file before it is deserialized, so they win over
//! file values. The per-module `seed` fields are not read by the pipeline;
//! every module seed is derived from the global seed (see
//! [`PipelineConfig::seeds`]).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_param, Error, Result};
use crate::foreground::ExtractionConfig;
use crate::metrics::EvalSettings;
use crate::mixer::MixerConfig;
use crate::phantom::{check_class_mix, PhantomConfig};
use crate::rng::derive_seed;
use crate::segmenter::TrainConfig;
use crate::TOOL_VERSION;

/// Seed used when neither the config, a flag nor the environment sets one.
pub const DEFAULT_SEED: u64 = 0;

/// Sizes of the end-to-end experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Homogeneous phantom images generated per class.
    pub images_per_class: usize,
    /// Fraction of each class held out for evaluation.
    pub val_fraction: f64,
    pub true_mixtures: usize,
    /// Class proportions of the true-mixture test scenes.
    pub true_mix: Vec<(u8, f64)>,
    /// Composites of held-out images used as the artificial-mixture test set.
    pub artificial_mixtures: usize,
    /// True-mixture images rendered as overlays.
    pub overlays: usize,
    /// Use this manifest of homogeneous captures instead of phantoms.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Labelled true-mixture test manifest; required with `manifest`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_manifest: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            images_per_class: 100,
            val_fraction: 0.10,
            true_mixtures: 50,
            true_mix: vec![(1, 1.0 / 3.0), (2, 1.0 / 3.0), (3, 1.0 / 3.0)],
            artificial_mixtures: 50,
            overlays: 4,
            manifest: None,
            test_manifest: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_param((0.0..1.0).contains(&self.val_fraction), || {
            format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)
        })?;
        ensure_param(
            self.manifest.is_some() == self.test_manifest.is_some(),
            || "manifest and test_manifest must be given together".into(),
        )?;
        if self.manifest.is_none() {
            ensure_param(self.images_per_class >= 2, || {
                "images_per_class must be >= 2".into()
            })?;
            check_class_mix(&self.true_mix)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub extraction: ExtractionConfig,
    pub mixer: MixerConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub experiment: ExperimentConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            phantom: PhantomConfig::default(),
            extraction: ExtractionConfig::default(),
            mixer: MixerConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

/// Overrides selecting the full-scale schedule: 518 px crops and windows,
/// 16 crops per batch, 20k iterations, and phantoms large enough to crop.
pub fn full_scale_overrides() -> Vec<String> {
    let t = TrainConfig::full_scale();
    vec![
        format!("train.iterations={}", t.iterations),
        format!("train.crops_per_batch={}", t.crops_per_batch),
        format!("train.batch_pixels={}", t.batch_pixels),
        format!("train.crop_size={}", t.crop_size),
        format!("mixer.crop_size={}", t.crop_size),
        format!("eval.window={}", t.crop_size),
        format!("eval.stride={}", t.crop_size / 2),
        format!("phantom.image_size={}", 2 * t.crop_size),
        "phantom.cells_per_image=[175, 280]".into(),
    ]
}

/// Module seeds derived from the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub phantom: u64,
    pub split: u64,
    pub mixer: u64,
    pub train: u64,
    pub eval_mix: u64,
}

impl Seeds {
    pub fn from_global(seed: u64) -> Self {
        Self {
            phantom: derive_seed(seed, "phantom", 0),
            split: derive_seed(seed, "split", 0),
            mixer: derive_seed(seed, "mixer", 0),
            train: derive_seed(seed, "train", 0),
            eval_mix: derive_seed(seed, "eval-mix", 0),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `dotted.key` inside `table`, creating intermediate tables.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("non-empty split");
    let mut node = table;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    node.insert(last.to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl PipelineConfig {
    /// Parses a TOML document and applies `section.key=value` overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(config_err)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(config_err)
    }

    pub fn validate(&self) -> Result<()> {
        let tag = |section: &'static str| move |e: Error| Error::Config(format!("[{section}] {e}"));
        self.phantom.validate().map_err(tag("phantom"))?;
        self.extraction.validate().map_err(tag("extraction"))?;
        self.mixer.validate().map_err(tag("mixer"))?;
        self.train.validate().map_err(tag("train"))?;
        self.eval.validate().map_err(tag("eval"))?;
        self.experiment.validate().map_err(tag("experiment"))
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_global(self.seed)
    }

    /// Copy with every module seed replaced by its derived value.
    pub fn seeded(&self) -> Self {
        let s = self.seeds();
        let mut cfg = self.clone();
        cfg.phantom.seed = s.phantom;
        cfg.mixer.seed = s.mixer;
        cfg.train.seed = s.train;
        cfg
    }

    /// SHA-256 over the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn stamp(&self) -> Stamp {
        Stamp {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: self.hash(),
            seed: self.seed,
        }
    }
}

/// Provenance attached to every written artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(flatten)]
    pub stamp: Stamp,
    /// Artifact paths, relative to the sidecar's directory.
    pub artifacts: Vec<String>,
}

/// Sidecar file name used for directories of artifacts.
pub const SIDECAR_NAME: &str = "sidecar.json";

/// Path of the sidecar for a single-file artifact: `<file>.sidecar.json`.
pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".sidecar.json");
    artifact.with_file_name(name)
}

pub fn write_sidecar(path: &Path, stamp: &Stamp, mut artifacts: Vec<String>) -> Result<()> {
    artifacts.sort();
    let sidecar = Sidecar {
        stamp: stamp.clone(),
        artifacts,
    };
    let text = serde_json::to_string_pretty(&sidecar)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(
            PipelineConfig::from_toml("", &[]).unwrap(),
            PipelineConfig::default()
        );
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_win_over_file() {
        let text = "seed = 3\n[train]\niterations = 10\n";
        let cfg = PipelineConfig::from_toml(
            text,
            &[
                "train.iterations=25".into(),
                "seed=9".into(),
                "eval.convention=precision".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.iterations, 25);
        assert_eq!(cfg.seed, 9);
        assert_eq!(
            cfg.eval.convention,
            crate::metrics::AccuracyConvention::Precision
        );
        assert_eq!(cfg.train.learning_rate, 0.001);
    }

    #[test]
    fn bad_documents_are_config_errors() {
        for (text, o) in [
            ("seed = \"x\"", vec![]),
            ("[train]\nlearning_rate = -1.0", vec![]),
            ("", vec!["train.iterations".to_string()]),
            ("", vec!["seed.x=1".to_string()]),
            ("[eval]\nwindow = 8\nstride = 16", vec![]),
        ] {
            let err = PipelineConfig::from_toml(text, &o).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text:?} {o:?}: {err}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.iterations += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn module_seeds_follow_global_seed() {
        let a = PipelineConfig {
            seed: 1,
            ..Default::default()
        }
        .seeded();
        let b = PipelineConfig {
            seed: 2,
            ..Default::default()
        }
        .seeded();
        assert_ne!(a.phantom.seed, b.phantom.seed);
        assert_ne!(a.train.seed, a.mixer.seed);
        assert_eq!(
            a,
            PipelineConfig {
                seed: 1,
                ..Default::default()
            }
            .seeded()
        );
    }

    #[test]
    fn full_scale_applies_and_yields_to_later_overrides() {
        let mut o = full_scale_overrides();
        o.push("train.iterations=3".into());
        let cfg = PipelineConfig::from_toml("", &o).unwrap();
        assert_eq!(cfg.train.crop_size, 518);
        assert_eq!(cfg.eval.window, 518);
        assert_eq!(cfg.train.iterations, 3);
        assert!(cfg.phantom.image_size >= 518);
    }

    #[test]
    fn sidecar_naming() {
        assert_eq!(
            sidecar_path(Path::new("out/model.json")),
            Path::new("out/model.json.sidecar.json")
        );
    }
}
