//! Artificial mixtures of homogeneous populations.
//!
//! Two crops are drawn from different populations, each is normalized so its
//! background matches a shared target mean and standard deviation, and the
//! pair is blended as `lambda * I1 + (1 - lambda) * I2`. The label maps are
//! merged by letting every non-background pixel of the second map overwrite
//! the first.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_param, Error, Result};
use crate::imaging::io::{load_image, load_labels, save_image, save_labels};
use crate::imaging::threshold::mean_std;
use crate::imaging::{Image, LabelMap, BACKGROUND};
use crate::manifest::{DatasetManifest, ManifestRecord, Split};
use crate::rng::{self, StreamRng};

/// Fraction of clamped pixels above which a composite is flagged.
pub const CLAMP_FLAG_FRACTION: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixerConfig {
    pub lambda: f64,
    pub crop_size: usize,
    pub target_bg_mean: f64,
    pub target_bg_std: f64,
    pub seed: u64,
    pub pairs_per_epoch: usize,
    /// Permit pairs drawn from the same class.
    pub allow_same_class: bool,
    /// Redraws allowed when a crop has too little usable background.
    pub max_redraws: usize,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            crop_size: 128,
            target_bg_mean: 0.5,
            target_bg_std: 0.05,
            seed: 0,
            pairs_per_epoch: 1000,
            allow_same_class: false,
            max_redraws: 20,
        }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        ensure_param(self.crop_size >= 8, || {
            format!("crop_size must be >= 8, got {}", self.crop_size)
        })?;
        ensure_param(
            self.target_bg_mean > 0.0 && self.target_bg_mean < 1.0,
            || "target_bg_mean must lie in (0, 1)".into(),
        )?;
        ensure_param(
            self.target_bg_std >= 0.0 && self.target_bg_std.is_finite(),
            || "target_bg_std must be non-negative".into(),
        )
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    ensure_param(lambda > 0.0 && lambda <= 1.0, || {
        format!("lambda must lie in (0, 1], got {lambda}")
    })
}

/// Affine intensity map `x -> (x - bg_mean) / bg_std * target_std + target_mean`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundAffine {
    pub bg_mean: f64,
    pub bg_std: f64,
    pub scale: f64,
    pub offset: f64,
}

impl BackgroundAffine {
    /// Fits the map from the pixels labelled background in `labels`.
    pub fn fit(img: &Image, labels: &LabelMap, target_mean: f64, target_std: f64) -> Result<Self> {
        img.check_same_shape(labels.shape())?;
        let bg = img
            .as_slice()
            .iter()
            .zip(labels.as_slice())
            .filter(|(_, &l)| l == BACKGROUND)
            .map(|(&v, _)| v);
        let (bg_mean, bg_std) = mean_std(bg)?;
        let scale = if target_std == 0.0 {
            0.0
        } else if bg_std > 1e-8 {
            target_std / bg_std
        } else {
            return Err(Error::DegenerateInput(format!(
                "background standard deviation {bg_std:e} is too small to normalize"
            )));
        };
        Ok(Self {
            bg_mean,
            bg_std,
            scale,
            offset: target_mean - bg_mean * scale,
        })
    }

    pub fn apply_unclamped(&self, img: &Image) -> Vec<f64> {
        img.as_slice()
            .iter()
            .map(|&v| v * self.scale + self.offset)
            .collect()
    }
}

/// Background-statistics normalization followed by clamping to `[0, 1]`.
pub fn normalize_background(
    img: &Image,
    labels: &LabelMap,
    target_mean: f64,
    target_std: f64,
) -> Result<Image> {
    let affine = BackgroundAffine::fit(img, labels, target_mean, target_std)?;
    Image::from_clamped(img.width(), img.height(), affine.apply_unclamped(img))
}

/// Pointwise `lambda * i1 + (1 - lambda) * i2` without clamping.
pub fn mix_images_unclamped(i1: &Image, i2: &Image, lambda: f64) -> Result<Vec<f64>> {
    i1.check_same_shape(i2.shape())?;
    check_lambda(lambda)?;
    Ok(i1
        .as_slice()
        .iter()
        .zip(i2.as_slice())
        .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
        .collect())
}

pub fn mix_images(i1: &Image, i2: &Image, lambda: f64) -> Result<Image> {
    Image::from_clamped(
        i1.width(),
        i1.height(),
        mix_images_unclamped(i1, i2, lambda)?,
    )
}

/// `m2 + (1 - sign(m2)) * m1`: non-background pixels of `m2` win.
pub fn mix_labels(m1: &LabelMap, m2: &LabelMap) -> Result<LabelMap> {
    m1.check_same_shape(m2.shape())?;
    ensure_param(!m1.contains_ignore() && !m2.contains_ignore(), || {
        "ignore labels cannot be mixed".into()
    })?;
    let data = m1
        .as_slice()
        .iter()
        .zip(m2.as_slice())
        .map(|(&a, &b)| if b != BACKGROUND { b } else { a })
        .collect();
    LabelMap::new(m1.width(), m1.height(), data)
}

/// A fully annotated homogeneous image available for mixing.
#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub id: String,
    pub class: u8,
    pub image: Image,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, Default)]
pub struct SamplePool {
    pub entries: Vec<PoolEntry>,
}

impl SamplePool {
    pub fn new(entries: Vec<PoolEntry>) -> Result<Self> {
        for e in &entries {
            e.image.check_same_shape(e.labels.shape())?;
            ensure_param(!e.labels.contains_ignore(), || {
                format!("{}: pool labels contain ignore", e.id)
            })?;
        }
        Ok(Self { entries })
    }

    /// Loads every record (optionally restricted to one split) that has
    /// both a label map and a class.
    pub fn from_manifest(manifest: &DatasetManifest, split: Option<Split>) -> Result<Self> {
        let entries = manifest
            .records
            .par_iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(|r| {
                let labels_path = r.labels.as_ref().ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "{}: record has no label map",
                        r.image.display()
                    ))
                })?;
                let class = r.class.filter(|&c| c >= 1).ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "{}: record has no cell class",
                        r.image.display()
                    ))
                })?;
                Ok(PoolEntry {
                    id: r.image.display().to_string(),
                    class,
                    image: load_image(manifest.resolve(&r.image))?,
                    labels: load_labels(manifest.resolve(labels_path))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn n_distinct_classes(&self) -> usize {
        let mut seen = [false; 256];
        self.entries
            .iter()
            .for_each(|e| seen[e.class as usize] = true);
        seen.iter().filter(|&&s| s).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSource {
    pub record: String,
    pub class: u8,
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub first: CropSource,
    pub second: CropSource,
    pub lambda: f64,
    pub clamped_fraction: f64,
    /// Set when clamping touched more than [`CLAMP_FLAG_FRACTION`] of pixels.
    pub clamp_flag: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub image: Image,
    pub labels: LabelMap,
    pub provenance: Provenance,
}

/// Ordered pair of distinct records, uniform over pairs with different
/// classes (or over all distinct pairs when same-class mixing is allowed).
fn draw_pair(pool: &SamplePool, allow_same_class: bool, rng: &mut StreamRng) -> (usize, usize) {
    let n = pool.len();
    loop {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        if allow_same_class || pool.entries[i].class != pool.entries[j].class {
            return (i, j);
        }
    }
}

fn draw_crop(
    entry: &PoolEntry,
    crop: usize,
    rng: &mut StreamRng,
) -> Result<(Image, LabelMap, usize, usize)> {
    let x = rng.random_range(0..=entry.image.width() - crop);
    let y = rng.random_range(0..=entry.image.height() - crop);
    Ok((
        entry.image.crop(x, y, crop, crop)?,
        entry.labels.crop(x, y, crop, crop)?,
        x,
        y,
    ))
}

/// Draws one composite. The result depends only on the pool, the config and
/// the state of `rng`.
pub fn sample_mixed_crop(
    pool: &SamplePool,
    cfg: &MixerConfig,
    rng: &mut StreamRng,
) -> Result<MixedSample> {
    cfg.validate()?;
    ensure_param(pool.len() >= 2, || {
        "mixing needs at least 2 pool records".into()
    })?;
    ensure_param(
        cfg.allow_same_class || pool.n_distinct_classes() >= 2,
        || "mixing needs records of at least 2 distinct classes".into(),
    )?;
    for e in &pool.entries {
        ensure_param(
            e.image.width() >= cfg.crop_size && e.image.height() >= cfg.crop_size,
            || {
                format!(
                    "{}: {}x{} image is smaller than crop size {}",
                    e.id,
                    e.image.width(),
                    e.image.height(),
                    cfg.crop_size
                )
            },
        )?;
    }

    let mut last_err = None;
    for _ in 0..=cfg.max_redraws {
        let (i, j) = draw_pair(pool, cfg.allow_same_class, rng);
        let (a, b) = (&pool.entries[i], &pool.entries[j]);
        let (img1, lab1, x1, y1) = draw_crop(a, cfg.crop_size, rng)?;
        let (img2, lab2, x2, y2) = draw_crop(b, cfg.crop_size, rng)?;
        let n1 = BackgroundAffine::fit(&img1, &lab1, cfg.target_bg_mean, cfg.target_bg_std);
        let n2 = BackgroundAffine::fit(&img2, &lab2, cfg.target_bg_mean, cfg.target_bg_std);
        let (n1, n2) = match (n1, n2) {
            (Ok(n1), Ok(n2)) => (n1, n2),
            (Err(e), _) | (_, Err(e)) => {
                last_err = Some(e);
                continue;
            }
        };
        let norm1 = Image::from_clamped(cfg.crop_size, cfg.crop_size, n1.apply_unclamped(&img1))?;
        let norm2 = Image::from_clamped(cfg.crop_size, cfg.crop_size, n2.apply_unclamped(&img2))?;
        let raw = mix_images_unclamped(&norm1, &norm2, cfg.lambda)?;
        let clamped = raw.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
        let clamped_fraction = clamped as f64 / raw.len() as f64;
        let image = Image::from_clamped(cfg.crop_size, cfg.crop_size, raw)?;
        let labels = mix_labels(&lab1, &lab2)?;
        return Ok(MixedSample {
            image,
            labels,
            provenance: Provenance {
                first: CropSource {
                    record: a.id.clone(),
                    class: a.class,
                    x: x1,
                    y: y1,
                },
                second: CropSource {
                    record: b.id.clone(),
                    class: b.class,
                    x: x2,
                    y: y2,
                },
                lambda: cfg.lambda,
                clamped_fraction,
                clamp_flag: clamped_fraction > CLAMP_FLAG_FRACTION,
            },
        });
    }
    Err(last_err.unwrap_or_else(|| Error::DegenerateInput("no usable crop pair".into())))
}

/// Composite number `index` of the stream seeded by `cfg.seed`.
pub fn sample_indexed(pool: &SamplePool, cfg: &MixerConfig, index: u64) -> Result<MixedSample> {
    sample_mixed_crop(pool, cfg, &mut rng::stream(cfg.seed, "mix", index))
}

/// Writes `n` composites (16-bit image PNG plus label PNG) and a manifest
/// `manifest.jsonl` into `out_dir`; sample `k` depends only on `(seed, k)`.
pub fn synthesize_set(
    pool: &SamplePool,
    cfg: &MixerConfig,
    n: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results = (0..n)
        .into_par_iter()
        .map(|k| {
            let sample = sample_indexed(pool, cfg, k as u64)?;
            let image = format!("mix_{k:05}.png");
            let labels = format!("mix_{k:05}_labels.png");
            save_image(&sample.image, out_dir.join(&image))?;
            save_labels(&sample.labels, out_dir.join(&labels))?;
            Ok((
                ManifestRecord {
                    image: image.into(),
                    labels: Some(labels.into()),
                    class: None,
                    split: Split::Train,
                },
                sample.provenance,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (records, provenance): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let manifest = DatasetManifest::new(out_dir, records);
    manifest.save(out_dir.join("manifest.jsonl"))?;
    let prov_path = out_dir.join("provenance.json");
    let text = serde_json::to_string_pretty(&provenance)?;
    fs::write(&prov_path, text).map_err(|e| Error::io(&prov_path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_population, PhantomConfig};

    fn img(data: &[f64]) -> Image {
        Image::new(data.len(), 1, data.to_vec()).unwrap()
    }

    fn labels(data: &[u8]) -> LabelMap {
        LabelMap::new(data.len(), 1, data.to_vec()).unwrap()
    }

    #[test]
    fn normalization_identity_when_already_on_target() {
        // Background 0.45/0.55 alternating: mean 0.5, std 0.05.
        let data = [0.45, 0.55, 0.45, 0.55, 0.9];
        let l = labels(&[0, 0, 0, 0, 1]);
        let a = BackgroundAffine::fit(&img(&data), &l, 0.5, 0.05).unwrap();
        for (out, inp) in a.apply_unclamped(&img(&data)).iter().zip(data) {
            assert!((out - inp).abs() < 1e-6);
        }
    }

    #[test]
    fn normalization_shift_only() {
        let data = [0.7, 0.9, 0.7, 0.9, 0.2];
        let l = labels(&[0, 0, 0, 0, 2]);
        let out = normalize_background(&img(&data), &l, 0.5, 0.1).unwrap();
        for (o, i) in out.as_slice().iter().zip(data) {
            assert!((o - (i - 0.3).clamp(0.0, 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_rejects_flat_background() {
        let l = labels(&[0, 0, 0, 1]);
        let r = normalize_background(&img(&[0.4, 0.4, 0.4, 0.9]), &l, 0.5, 0.05);
        assert!(matches!(r, Err(Error::DegenerateInput(_))));
        // A zero target std is allowed and collapses to the target mean.
        let out = normalize_background(&img(&[0.4, 0.4, 0.4, 0.9]), &l, 0.5, 0.0).unwrap();
        assert!(out.as_slice().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn image_mix_arithmetic() {
        let a = img(&[0.2, 0.8]);
        let b = img(&[0.6, 0.0]);
        let m = mix_images(&a, &b, 0.5).unwrap();
        assert!((m.get(0, 0) - 0.4).abs() < 1e-12);
        assert_eq!(mix_images(&a, &b, 1.0).unwrap(), a);
        assert_eq!(mix_images(&a, &a, 0.3).unwrap().as_slice().len(), 2);
        assert!(mix_images(&a, &img(&[0.1]), 0.5).is_err());
        assert!(mix_images(&a, &b, 0.0).is_err());
        assert!(mix_images(&a, &b, 1.5).is_err());
    }

    #[test]
    fn label_mix_overwrite_rule() {
        let m1 = labels(&[0, 1, 2, 0]);
        let m2 = labels(&[0, 0, 3, 3]);
        assert_eq!(mix_labels(&m1, &m2).unwrap().as_slice(), &[0, 1, 3, 3]);
        let zero = labels(&[0, 0, 0, 0]);
        assert_eq!(mix_labels(&m1, &zero).unwrap(), m1);
        assert_eq!(mix_labels(&zero, &m2).unwrap(), m2);
        assert!(mix_labels(&labels(&[255, 0, 0, 0]), &m2).is_err());
        assert!(mix_labels(&m1, &labels(&[0])).is_err());
    }

    fn pool(size: usize) -> SamplePool {
        let cfg = PhantomConfig {
            image_size: size,
            cells_per_image: (3, 5),
            seed: 21,
            ..PhantomConfig::default()
        };
        let mut entries = Vec::new();
        for class in 1..=3u8 {
            for (i, p) in generate_population(class, 2, &cfg)
                .unwrap()
                .into_iter()
                .enumerate()
            {
                entries.push(PoolEntry {
                    id: format!("c{class}-{i}"),
                    class,
                    image: p.image,
                    labels: p.labels,
                });
            }
        }
        SamplePool::new(entries).unwrap()
    }

    #[test]
    fn sampling_is_deterministic_and_mixes_classes() {
        let pool = pool(80);
        let cfg = MixerConfig {
            crop_size: 48,
            seed: 4,
            ..MixerConfig::default()
        };
        for k in 0..10 {
            let a = sample_indexed(&pool, &cfg, k).unwrap();
            let b = sample_indexed(&pool, &cfg, k).unwrap();
            assert_eq!(a, b);
            assert_ne!(a.provenance.first.class, a.provenance.second.class);
            assert_eq!(a.image.shape(), (48, 48));
        }
    }

    #[test]
    fn sampling_rejects_small_images_and_single_class() {
        let p = pool(40);
        let cfg = MixerConfig {
            crop_size: 64,
            ..MixerConfig::default()
        };
        assert!(sample_indexed(&p, &cfg, 0).is_err());

        let single =
            SamplePool::new(p.entries.iter().filter(|e| e.class == 1).cloned().collect()).unwrap();
        let cfg = MixerConfig {
            crop_size: 32,
            ..MixerConfig::default()
        };
        assert!(sample_indexed(&single, &cfg, 0).is_err());
        let same = MixerConfig {
            allow_same_class: true,
            ..cfg
        };
        assert!(sample_indexed(&single, &same, 0).is_ok());
    }

    #[test]
    fn synthesized_set_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let pool = pool(64);
        let cfg = MixerConfig {
            crop_size: 32,
            seed: 8,
            ..MixerConfig::default()
        };
        let m = synthesize_set(&pool, &cfg, 4, dir.path()).unwrap();
        assert_eq!(m.records.len(), 4);
        let reloaded = DatasetManifest::load(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(reloaded.records, m.records);
        let labels = load_labels(dir.path().join("mix_00002_labels.png")).unwrap();
        assert_eq!(labels, sample_indexed(&pool, &cfg, 2).unwrap().labels);
    }

    proptest::proptest! {
        #[test]
        fn label_mix_is_idempotent_and_keeps_m2_foreground(
            pairs in proptest::collection::vec((0u8..4, 0u8..4), 1..100)
        ) {
            let m1 = LabelMap::new(pairs.len(), 1, pairs.iter().map(|p| p.0).collect()).unwrap();
            let m2 = LabelMap::new(pairs.len(), 1, pairs.iter().map(|p| p.1).collect()).unwrap();
            let once = mix_labels(&m1, &m2).unwrap();
            proptest::prop_assert_eq!(&mix_labels(&once, &m2).unwrap(), &once);
            for (o, b) in once.as_slice().iter().zip(m2.as_slice()) {
                if *b != 0 {
                    proptest::prop_assert_eq!(o, b);
                }
            }
        }

        #[test]
        fn image_mix_stays_between_inputs(
            pairs in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..100),
            lambda in 0.001f64..=1.0,
        ) {
            let a = Image::new(pairs.len(), 1, pairs.iter().map(|p| p.0).collect()).unwrap();
            let b = Image::new(pairs.len(), 1, pairs.iter().map(|p| p.1).collect()).unwrap();
            let m = mix_images(&a, &b, lambda).unwrap();
            for (v, (x, y)) in m.as_slice().iter().zip(&pairs) {
                proptest::prop_assert!(*v >= x.min(*y) - 1e-12 && *v <= x.max(*y) + 1e-12);
            }
        }
    }
}
