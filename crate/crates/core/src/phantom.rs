//! Synthetic brightfield-like phantoms with exact ground truth.
//!
//! Each image is a noisy flat background with elliptical cells stamped on
//! top. Cells of each class share a style (size, ring and interior
//! contrast, speckle), so class identity is learnable from local appearance.
//! Cells may touch; a later stamp overwrites an earlier one, label included.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_param, Error, Result};
use crate::imaging::io::{save_image, save_labels};
use crate::imaging::{Image, LabelMap, N_CLASSES};
use crate::manifest::{DatasetManifest, ManifestRecord, Split};
use crate::rng::{self, StreamRng};

const SUPERSAMPLE: usize = 4;

/// Appearance of one cell class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    /// Semi-major axis range in pixels.
    pub radius: (f64, f64),
    /// Eccentricity range; the minor axis is `radius * sqrt(1 - e^2)`.
    pub eccentricity: (f64, f64),
    /// Width of the boundary ring in pixels.
    pub ring_width: f64,
    /// Intensity offset of the ring relative to the background.
    pub ring_contrast: f64,
    /// Intensity offset of the interior relative to the background.
    pub interior_contrast: f64,
    /// Standard deviation of per-pixel texture inside the cell.
    pub speckle: f64,
    /// Depth in pixels over which the contrast ramps up from the boundary.
    pub edge_ramp: f64,
    /// Background shift of homogeneous captures of this class relative to
    /// `bg_mean`, standing in for per-culture acquisition sessions. True
    /// mixtures are rendered at `bg_mean`.
    #[serde(default)]
    pub session_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub image_size: usize,
    /// Inclusive range of cells attempted per image.
    pub cells_per_image: (usize, usize),
    /// Styles of classes 1, 2 and 3.
    pub class_styles: [ClassStyle; N_CLASSES],
    pub bg_mean: f64,
    /// Per-image uniform jitter of the background level.
    pub bg_jitter: f64,
    /// Additive Gaussian noise over the whole image.
    pub bg_noise: f64,
    /// Largest fraction of a new cell that may cover existing cells.
    pub max_overlap: f64,
    pub placement_retries: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: 192,
            cells_per_image: (25, 40),
            class_styles: [
                ClassStyle {
                    radius: (6.0, 8.0),
                    eccentricity: (0.0, 0.5),
                    ring_width: 3.0,
                    ring_contrast: -0.3,
                    interior_contrast: -0.12,
                    speckle: 0.02,
                    edge_ramp: 3.0,
                    session_offset: -0.07,
                },
                ClassStyle {
                    radius: (10.0, 13.0),
                    eccentricity: (0.0, 0.5),
                    ring_width: 2.0,
                    ring_contrast: -0.25,
                    interior_contrast: 0.2,
                    speckle: 0.02,
                    edge_ramp: 1.0,
                    session_offset: 0.04,
                },
                ClassStyle {
                    radius: (6.0, 8.0),
                    eccentricity: (0.2, 0.7),
                    ring_width: 2.0,
                    ring_contrast: -0.25,
                    interior_contrast: 0.05,
                    speckle: 0.12,
                    edge_ramp: 1.5,
                    session_offset: 0.0,
                },
            ],
            bg_mean: 0.5,
            bg_jitter: 0.03,
            bg_noise: 0.03,
            max_overlap: 0.15,
            placement_retries: 50,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_param(self.image_size >= 16, || {
            format!("phantom image_size must be >= 16, got {}", self.image_size)
        })?;
        ensure_param(self.cells_per_image.0 <= self.cells_per_image.1, || {
            "cells_per_image range is empty".into()
        })?;
        ensure_param((0.0..=1.0).contains(&self.bg_mean), || {
            "bg_mean outside [0, 1]".into()
        })?;
        ensure_param(self.bg_noise >= 0.0 && self.bg_jitter >= 0.0, || {
            "bg_noise and bg_jitter must be non-negative".into()
        })?;
        ensure_param((0.0..=1.0).contains(&self.max_overlap), || {
            "max_overlap outside [0, 1]".into()
        })?;
        for (i, s) in self.class_styles.iter().enumerate() {
            let c = i + 1;
            ensure_param(s.radius.0 >= 2.0 && s.radius.0 <= s.radius.1, || {
                format!("class {c}: radius range must satisfy 2 <= min <= max")
            })?;
            ensure_param(2.0 * s.radius.1 + 6.0 < self.image_size as f64, || {
                format!("class {c}: cells do not fit in the image")
            })?;
            ensure_param(
                0.0 <= s.eccentricity.0
                    && s.eccentricity.0 <= s.eccentricity.1
                    && s.eccentricity.1 < 1.0,
                || format!("class {c}: eccentricity range must lie in [0, 1)"),
            )?;
            ensure_param(
                s.ring_width >= 0.0 && s.speckle >= 0.0 && s.edge_ramp >= 0.0,
                || format!("class {c}: ring_width, speckle and edge_ramp must be non-negative"),
            )?;
            for bg in [self.bg_mean, self.bg_mean + s.session_offset] {
                for contrast in [0.0, s.ring_contrast, s.interior_contrast] {
                    let level = bg + contrast;
                    ensure_param((0.0..=1.0).contains(&level), || {
                        format!("class {c}: background {bg} + contrast {contrast} leaves [0, 1]")
                    })?;
                }
            }
        }
        Ok(())
    }

    fn style(&self, class: u8) -> &ClassStyle {
        &self.class_styles[class as usize - 1]
    }
}

/// One rendered image and its exact truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomImage {
    pub image: Image,
    pub labels: LabelMap,
    /// Cells requested but not placed within the overlap budget.
    pub skipped_cells: usize,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radial coordinate: `< 1` inside.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    /// Approximate distance inward from the boundary along the ray from the centre.
    fn depth(&self, x: f64, y: f64) -> f64 {
        let rho = self.rho(x, y);
        let r = (x - self.cx).hypot(y - self.cy);
        if rho <= 1e-12 {
            return self.b;
        }
        (1.0 - rho) * r / rho
    }

    fn coverage(&self, px: usize, py: usize) -> f64 {
        let step = 1.0 / SUPERSAMPLE as f64;
        let mut inside = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let x = px as f64 + (sx as f64 + 0.5) * step;
                let y = py as f64 + (sy as f64 + 0.5) * step;
                if self.rho(x, y) < 1.0 {
                    inside += 1;
                }
            }
        }
        inside as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }

    /// Inclusive pixel bounding box.
    fn bbox(&self, size: usize) -> (usize, usize, usize, usize) {
        let r = self.a.max(self.b) + 1.0;
        let lo = |c: f64| (c - r).floor().max(0.0) as usize;
        let hi = |c: f64| ((c + r).ceil() as usize).min(size - 1);
        (lo(self.cx), lo(self.cy), hi(self.cx), hi(self.cy))
    }
}

struct Canvas {
    size: usize,
    bg: f64,
    values: Vec<f64>,
    labels: Vec<u8>,
}

impl Canvas {
    fn new(size: usize, bg: f64) -> Self {
        Self {
            size,
            bg,
            values: vec![bg; size * size],
            labels: vec![0; size * size],
        }
    }

    fn sample_ellipse(&self, style: &ClassStyle, rng: &mut StreamRng) -> Ellipse {
        let a = rng.random_range(style.radius.0..=style.radius.1);
        let e = rng.random_range(style.eccentricity.0..=style.eccentricity.1);
        let b = (a * (1.0 - e * e).sqrt()).max(2.0);
        let theta = rng.random_range(0.0..PI);
        let margin = a + 2.0;
        let hi = self.size as f64 - margin - 1.0;
        Ellipse {
            cx: rng.random_range(margin..hi),
            cy: rng.random_range(margin..hi),
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// Fraction of the ellipse's truth pixels already labelled.
    fn overlap(&self, cell: &Ellipse) -> f64 {
        let (x0, y0, x1, y1) = cell.bbox(self.size);
        let (mut area, mut covered) = (0usize, 0usize);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if cell.coverage(x, y) >= 0.5 {
                    area += 1;
                    covered += usize::from(self.labels[y * self.size + x] != 0);
                }
            }
        }
        if area == 0 {
            1.0
        } else {
            covered as f64 / area as f64
        }
    }

    fn stamp(&mut self, cell: &Ellipse, class: u8, style: &ClassStyle, rng: &mut StreamRng) {
        let (x0, y0, x1, y1) = cell.bbox(self.size);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let cov = cell.coverage(x, y);
                if cov <= 0.0 {
                    continue;
                }
                let depth = cell.depth(x as f64 + 0.5, y as f64 + 0.5);
                let base = if depth < style.ring_width {
                    style.ring_contrast
                } else {
                    style.interior_contrast
                };
                let ramp = if style.edge_ramp > 0.0 {
                    (depth / style.edge_ramp).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                let contrast = base * ramp;
                let texture: f64 = rng.sample::<f64, _>(StandardNormal) * style.speckle;
                let value = self.bg + contrast + texture;
                let i = y * self.size + x;
                self.values[i] = (1.0 - cov) * self.values[i] + cov * value;
                if cov >= 0.5 {
                    self.labels[i] = class;
                }
            }
        }
    }

    fn finish(mut self, noise: f64, rng: &mut StreamRng) -> Result<(Image, LabelMap)> {
        if noise > 0.0 {
            let n = Normal::new(0.0, noise).expect("non-negative std");
            for v in &mut self.values {
                *v += n.sample(rng);
            }
        }
        let image = Image::from_clamped(self.size, self.size, self.values)?;
        let labels = LabelMap::new(self.size, self.size, self.labels)?;
        Ok((image, labels))
    }
}

fn check_class(class: u8) -> Result<()> {
    ensure_param((1..=N_CLASSES as u8).contains(&class), || {
        format!("class index must be in 1..={N_CLASSES}, got {class}")
    })
}

/// Renders one image whose cells draw their class from `pick_class`.
fn render(
    cfg: &PhantomConfig,
    bg_mean: f64,
    rng: &mut StreamRng,
    mut pick_class: impl FnMut(&mut StreamRng) -> u8,
) -> Result<PhantomImage> {
    let bg = (bg_mean + rng.random_range(-1.0..=1.0) * cfg.bg_jitter).clamp(0.0, 1.0);
    let mut canvas = Canvas::new(cfg.image_size, bg);
    let n_cells = rng.random_range(cfg.cells_per_image.0..=cfg.cells_per_image.1);
    let mut skipped = 0;
    for _ in 0..n_cells {
        let class = pick_class(rng);
        let style = cfg.style(class);
        let placed = (0..cfg.placement_retries.max(1)).find_map(|_| {
            let cell = canvas.sample_ellipse(style, rng);
            (canvas.overlap(&cell) <= cfg.max_overlap).then_some(cell)
        });
        match placed {
            Some(cell) => canvas.stamp(&cell, class, style, rng),
            None => skipped += 1,
        }
    }
    let (image, labels) = canvas.finish(cfg.bg_noise, rng)?;
    Ok(PhantomImage {
        image,
        labels,
        skipped_cells: skipped,
    })
}

/// Homogeneous images of a single class.
pub fn generate_population(
    class: u8,
    n_images: usize,
    cfg: &PhantomConfig,
) -> Result<Vec<PhantomImage>> {
    check_class(class)?;
    cfg.validate()?;
    let domain = format!("phantom-population-{class}");
    let bg_mean = cfg.bg_mean + cfg.style(class).session_offset;
    (0..n_images)
        .into_par_iter()
        .map(|i| {
            render(
                cfg,
                bg_mean,
                &mut rng::stream(cfg.seed, &domain, i as u64),
                |_| class,
            )
        })
        .collect()
}

/// Heterogeneous images where each cell's class is drawn from `class_mix`
/// (pairs of class and proportion, proportions summing to 1).
pub fn generate_true_mixture(
    class_mix: &[(u8, f64)],
    n_images: usize,
    cfg: &PhantomConfig,
) -> Result<Vec<PhantomImage>> {
    check_class_mix(class_mix)?;
    cfg.validate()?;
    let pick = |rng: &mut StreamRng| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(c, p) in class_mix {
            acc += p;
            if u < acc {
                return c;
            }
        }
        class_mix
            .iter()
            .rev()
            .find(|(_, p)| *p > 0.0)
            .map_or(class_mix[0].0, |(c, _)| *c)
    };
    (0..n_images)
        .into_par_iter()
        .map(|i| {
            render(
                cfg,
                cfg.bg_mean,
                &mut rng::stream(cfg.seed, "phantom-mixture", i as u64),
                pick,
            )
        })
        .collect()
}

/// Classes in 1..=3 with non-negative proportions summing to 1 within 1e-6.
pub fn check_class_mix(class_mix: &[(u8, f64)]) -> Result<()> {
    ensure_param(!class_mix.is_empty(), || "class mix is empty".into())?;
    for &(c, p) in class_mix {
        check_class(c)?;
        ensure_param(p >= 0.0 && p.is_finite(), || {
            format!("negative proportion for class {c}")
        })?;
    }
    let total: f64 = class_mix.iter().map(|(_, p)| p).sum();
    ensure_param((total - 1.0).abs() <= 1e-6, || {
        format!("class proportions must sum to 1, got {total}")
    })
}

/// Parses `"1:0.5,2:0.5"` into class proportions.
pub fn parse_class_mix(spec: &str) -> Result<Vec<(u8, f64)>> {
    spec.split(',')
        .map(|part| {
            let (c, p) = part.split_once(':').ok_or_else(|| {
                Error::InvalidParameter(format!("expected class:proportion, got {part:?}"))
            })?;
            let c: u8 = c
                .trim()
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("bad class {c:?}")))?;
            let p: f64 = p
                .trim()
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("bad proportion {p:?}")))?;
            Ok((c, p))
        })
        .collect()
}

/// Writes images and truth maps as `{stem}_{i:04}.png` / `{stem}_{i:04}_labels.png`
/// and returns a manifest describing them (paths relative to `out_dir`).
pub fn save_phantoms(
    images: &[PhantomImage],
    out_dir: &Path,
    stem: &str,
    class: Option<u8>,
    split: Split,
) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records = images
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let image = format!("{stem}_{i:04}.png");
            let labels = format!("{stem}_{i:04}_labels.png");
            save_image(&p.image, out_dir.join(&image))?;
            save_labels(&p.labels, out_dir.join(&labels))?;
            Ok(ManifestRecord {
                image: image.into(),
                labels: Some(labels.into()),
                class,
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest::new(out_dir, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PhantomConfig {
        PhantomConfig {
            image_size: 64,
            cells_per_image: (3, 5),
            seed: 11,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn zero_cells_gives_background_only() {
        let cfg = PhantomConfig {
            cells_per_image: (0, 0),
            ..small_cfg()
        };
        let level = cfg.bg_mean + cfg.class_styles[1].session_offset;
        for p in generate_population(2, 3, &cfg).unwrap() {
            assert_eq!(p.labels.foreground_count(), 0);
            let mean = p.image.as_slice().iter().sum::<f64>() / p.image.len() as f64;
            assert!((mean - level).abs() <= cfg.bg_jitter + 0.01);
        }
    }

    #[test]
    fn populations_are_deterministic() {
        let cfg = small_cfg();
        let a = generate_population(1, 3, &cfg).unwrap();
        let b = generate_population(1, 3, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_population(1, 3, &PhantomConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn population_labels_are_single_class() {
        for class in 1..=3u8 {
            let imgs = generate_population(class, 2, &small_cfg()).unwrap();
            for p in imgs {
                assert!(p.labels.foreground_count() > 0);
                assert!(p.labels.as_slice().iter().all(|&v| v == 0 || v == class));
            }
        }
    }

    #[test]
    fn class_index_validated() {
        assert!(generate_population(0, 1, &small_cfg()).is_err());
        assert!(generate_population(4, 1, &small_cfg()).is_err());
    }

    #[test]
    fn mixtures_contain_several_classes() {
        let cfg = PhantomConfig {
            image_size: 128,
            ..small_cfg()
        };
        let imgs = generate_true_mixture(&[(1, 0.5), (2, 0.5)], 4, &cfg).unwrap();
        let mut hist = [0usize; 4];
        for p in &imgs {
            for (h, v) in hist.iter_mut().zip(p.labels.class_histogram()) {
                *h += v;
            }
        }
        assert!(hist[1] > 0 && hist[2] > 0 && hist[3] == 0);
        assert!(generate_true_mixture(&[(1, 0.5), (2, 0.4)], 1, &cfg).is_err());
    }

    #[test]
    fn truth_marks_stamped_cells() {
        // Noise-free single cells with hard edges: the truth covers exactly
        // the pixels the stamp changed by at least half coverage, and nothing
        // else changed.
        let mut cfg = PhantomConfig {
            bg_noise: 0.0,
            bg_jitter: 0.0,
            cells_per_image: (1, 1),
            ..small_cfg()
        };
        cfg.class_styles.iter_mut().for_each(|s| s.edge_ramp = 0.0);
        let level = cfg.bg_mean + cfg.class_styles[1].session_offset;
        for p in generate_population(2, 4, &cfg).unwrap() {
            let fg = p.labels.foreground_mask();
            assert!(fg.count_true() > 0);
            for y in 0..64 {
                for x in 0..64 {
                    let dev = (p.image.get(x, y) - level).abs();
                    if fg.get(x, y) {
                        assert!(dev > 0.02, "labelled pixel ({x},{y}) unchanged");
                    } else if dev > 1e-12 {
                        let near = (-1..=1isize).any(|dy| {
                            (-1..=1isize).any(|dx| fg.get_clamped(x as isize + dx, y as isize + dy))
                        });
                        assert!(near, "changed pixel ({x},{y}) far from truth");
                    }
                }
            }
        }
    }

    #[test]
    fn parse_mix_spec() {
        assert_eq!(
            parse_class_mix("1:0.5, 3:0.5").unwrap(),
            vec![(1, 0.5), (3, 0.5)]
        );
        assert!(parse_class_mix("1-0.5").is_err());
        assert!(parse_class_mix("x:0.5").is_err());
    }
}
