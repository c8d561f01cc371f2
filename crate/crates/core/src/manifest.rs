//! Dataset manifests: one JSON object per line.
//!
//! ```text
//! {"image": "a.png", "labels": "a_labels.png", "class": 1, "split": "train"}
//! {"image": "b.png", "labels": null, "class": 2, "split": "val"}
//! ```
//!
//! Relative paths resolve against the directory holding the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_param, Error, Result};
use crate::imaging::N_CLASSES;
use crate::rng;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub labels: Option<PathBuf>,
    pub class: Option<u8>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub version: u32,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Self {
        Self {
            root: root.into(),
            version: MANIFEST_VERSION,
            records,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            let record: ManifestRecord =
                serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            if let Some(c) = record.class {
                if c as usize > N_CLASSES {
                    return Err(bad(format!("class {c} outside 0..={N_CLASSES}")));
                }
            }
            records.push(record);
        }
        let parent = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let root = std::path::absolute(parent).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(root, records))
    }

    /// Writes the records as JSON lines. Paths are written as stored.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn with_split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Record counts per class; records without a class are keyed `None`.
    pub fn class_counts(&self) -> BTreeMap<Option<u8>, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.class).or_insert(0) += 1;
        }
        counts
    }
}

/// `floor(x + 0.5)`: round half up.
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Stratified train/val split.
///
/// Within each class stratum (records without a class form their own
/// stratum) `round_half_up(val_fraction * n)` records are tagged `val` and
/// the rest `train`. Records already tagged `test` are left untouched.
pub fn split_manifest(
    manifest: &DatasetManifest,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    ensure_param((0.0..=1.0).contains(&val_fraction), || {
        format!("val_fraction must be in [0, 1], got {val_fraction}")
    })?;
    let mut strata: BTreeMap<Option<u8>, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if r.split != Split::Test {
            strata.entry(r.class).or_default().push(i);
        }
    }
    let mut out = manifest.clone();
    for (class, mut idx) in strata {
        let n_val = round_half_up(val_fraction * idx.len() as f64).min(idx.len());
        let key = class.map_or(u64::MAX, u64::from);
        idx.shuffle(&mut rng::stream(seed, "split", key));
        for (k, &i) in idx.iter().enumerate() {
            out.records[i].split = if k < n_val { Split::Val } else { Split::Train };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(counts: &[(u8, usize)]) -> DatasetManifest {
        let records = counts
            .iter()
            .flat_map(|&(c, n)| {
                (0..n).map(move |i| ManifestRecord {
                    image: PathBuf::from(format!("c{c}/{i}.png")),
                    labels: None,
                    class: Some(c),
                    split: Split::Train,
                })
            })
            .collect();
        DatasetManifest::new("/data", records)
    }

    #[test]
    fn split_sizes_follow_round_half_up() {
        let m = synthetic(&[(1, 2405), (2, 1603), (3, 588)]);
        let s = split_manifest(&m, 0.10, 42).unwrap();
        for (class, expected) in [(1, 241), (2, 160), (3, 59)] {
            let n = s
                .records
                .iter()
                .filter(|r| r.class == Some(class) && r.split == Split::Val)
                .count();
            assert_eq!(n, expected, "class {class}");
        }
    }

    #[test]
    fn split_is_deterministic_partition() {
        let m = synthetic(&[(1, 50), (2, 31)]);
        let a = split_manifest(&m, 0.2, 9).unwrap();
        assert_eq!(a, split_manifest(&m, 0.2, 9).unwrap());
        assert_ne!(a, split_manifest(&m, 0.2, 10).unwrap());
        // Same images, each tagged exactly once.
        let images: Vec<_> = a.records.iter().map(|r| &r.image).collect();
        assert_eq!(
            images,
            m.records.iter().map(|r| &r.image).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_fraction_keeps_everything_in_train() {
        let m = synthetic(&[(1, 10), (3, 4)]);
        let s = split_manifest(&m, 0.0, 1).unwrap();
        assert!(s.records.iter().all(|r| r.split == Split::Train));
        assert!(split_manifest(&m, 1.5, 1).is_err());
    }

    #[test]
    fn test_records_untouched() {
        let mut m = synthetic(&[(1, 10)]);
        m.records[0].split = Split::Test;
        let s = split_manifest(&m, 0.5, 3).unwrap();
        assert_eq!(s.records[0].split, Split::Test);
        assert_eq!(s.with_split(Split::Val).count(), 5);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut m = synthetic(&[(2, 3)]);
        m.records[1].labels = Some("l.png".into());
        m.records[2].class = None;
        m.root = dir.path().to_path_buf();
        m.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"image":"c2/0.png","labels":null,"class":2,"split":"train"}"#));
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    }

    #[test]
    fn invalid_lines_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            "{\"image\":\"a\",\"labels\":null,\"class\":7,\"split\":\"train\"}\n",
        )
        .unwrap();
        assert!(matches!(
            DatasetManifest::load(&path),
            Err(Error::Manifest { line: 1, .. })
        ));
        fs::write(&path, "\nnot json\n").unwrap();
        assert!(matches!(
            DatasetManifest::load(&path),
            Err(Error::Manifest { line: 2, .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn split_sizes_round_half_up_per_class(
            counts in proptest::collection::vec(1usize..200, 1..4),
            fraction in 0.0f64..0.9,
            seed in proptest::prelude::any::<u64>(),
        ) {
            let spec: Vec<(u8, usize)> = counts.iter().enumerate().map(|(i, &n)| (i as u8 + 1, n)).collect();
            let s = split_manifest(&synthetic(&spec), fraction, seed).unwrap();
            for (class, n) in spec {
                let val = s.records.iter().filter(|r| r.class == Some(class) && r.split == Split::Val).count();
                proptest::prop_assert_eq!(val, (n as f64 * fraction + 0.5).floor() as usize);
            }
        }
    }
}
