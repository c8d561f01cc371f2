//! Grey-level and binary morphology, hole filling and connected components.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::raster::{BinaryMask, GradientField};
use crate::error::{Error, Result};

/// Neighbourhood for morphological operators, as `(dx, dy)` offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuringElement {
    offsets: Vec<(isize, isize)>,
}

impl StructuringElement {
    /// Must be nonempty and contain the origin.
    pub fn new(offsets: Vec<(isize, isize)>) -> Result<Self> {
        if !offsets.contains(&(0, 0)) {
            return Err(Error::InvalidParameter(
                "structuring element must contain the origin".into(),
            ));
        }
        Ok(Self { offsets })
    }

    /// `(2r+1) x (2r+1)` square.
    pub fn square(radius: usize) -> Self {
        let r = radius as isize;
        let offsets = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .collect();
        Self { offsets }
    }

    /// Offsets within Euclidean distance `radius` of the origin.
    pub fn disk(radius: usize) -> Self {
        let r = radius as isize;
        let r2 = (radius * radius) as isize;
        let offsets = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .filter(|(dx, dy)| dx * dx + dy * dy <= r2)
            .collect();
        Self { offsets }
    }

    /// Plus-shaped element with arms of length `radius`.
    pub fn cross(radius: usize) -> Self {
        let r = radius as isize;
        let mut offsets: Vec<_> = (-r..=r).map(|d| (d, 0)).collect();
        offsets.extend((-r..=r).filter(|&d| d != 0).map(|d| (0, d)));
        Self { offsets }
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }
}

impl Default for StructuringElement {
    fn default() -> Self {
        Self::square(1)
    }
}

/// Serializable description of a structuring element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "shape", content = "radius", rename_all = "snake_case")]
pub enum ElementShape {
    Square(usize),
    Disk(usize),
    Cross(usize),
}

impl ElementShape {
    pub fn build(self) -> StructuringElement {
        match self {
            ElementShape::Square(r) => StructuringElement::square(r),
            ElementShape::Disk(r) => StructuringElement::disk(r),
            ElementShape::Cross(r) => StructuringElement::cross(r),
        }
    }
}

impl Default for ElementShape {
    fn default() -> Self {
        ElementShape::Square(1)
    }
}

/// `out(x, y) = min over (i, j) in B of src(x - i, y - j)`, edge-replicated.
fn reflected_fold<T: Copy>(
    src: &[T],
    width: usize,
    height: usize,
    b: &StructuringElement,
    init: T,
    pick: impl Fn(T, T) -> T,
) -> Vec<T> {
    let (w, h) = (width as isize, height as isize);
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let mut acc = init;
            for &(i, j) in b.offsets() {
                let xx = (x - i).clamp(0, w - 1);
                let yy = (y - j).clamp(0, h - 1);
                acc = pick(acc, src[(yy * w + xx) as usize]);
            }
            out.push(acc);
        }
    }
    out
}

/// Grey-level erosion of a gradient field.
pub fn erode(field: &GradientField, b: &StructuringElement) -> GradientField {
    let data = reflected_fold(
        field.as_slice(),
        field.width(),
        field.height(),
        b,
        f64::INFINITY,
        f64::min,
    );
    GradientField::from_raw(field.width(), field.height(), data)
}

pub fn erode_mask(mask: &BinaryMask, b: &StructuringElement) -> BinaryMask {
    let data = reflected_fold(
        mask.as_slice(),
        mask.width(),
        mask.height(),
        b,
        true,
        |a, v| a && v,
    );
    BinaryMask::new(mask.width(), mask.height(), data).expect("shape preserved")
}

pub fn dilate_mask(mask: &BinaryMask, b: &StructuringElement) -> BinaryMask {
    let data = reflected_fold(
        mask.as_slice(),
        mask.width(),
        mask.height(),
        b,
        false,
        |a, v| a || v,
    );
    BinaryMask::new(mask.width(), mask.height(), data).expect("shape preserved")
}

/// Dilation followed by erosion with a disk of the given radius.
pub fn close_mask(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let b = StructuringElement::disk(radius);
    erode_mask(&dilate_mask(mask, &b), &b)
}

/// Sets every background pixel not 4-connected to the image border.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = mask.shape();
    let src = mask.as_slice();
    let mut outside = vec![false; src.len()];
    let mut queue = VecDeque::new();
    let seed = |i: usize, outside: &mut Vec<bool>, queue: &mut VecDeque<usize>| {
        if !src[i] && !outside[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    };
    for x in 0..w {
        seed(x, &mut outside, &mut queue);
        seed((h - 1) * w + x, &mut outside, &mut queue);
    }
    for y in 0..h {
        seed(y * w, &mut outside, &mut queue);
        seed(y * w + w - 1, &mut outside, &mut queue);
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        let mut visit = |j: usize| {
            if !src[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
    }
    let data = outside.iter().map(|&o| !o).collect();
    BinaryMask::new(w, h, data).expect("shape preserved")
}

/// 8-connected component labels of the `true` pixels (0 = unlabelled,
/// components numbered from 1 in raster order of their first pixel) and the
/// component count.
pub fn connected_components(mask: &BinaryMask) -> (Vec<u32>, usize) {
    let (w, h) = mask.shape();
    let src = mask.as_slice();
    let mut labels = vec![0u32; src.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..src.len() {
        if !src[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (xx, yy) = (x + dx, y + dy);
                    if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        continue;
                    }
                    let j = yy as usize * w + xx as usize;
                    if src[j] && labels[j] == 0 {
                        labels[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Clears 8-connected components with fewer than `min_area` pixels.
pub fn remove_small_components(mask: &BinaryMask, min_area: usize) -> BinaryMask {
    if min_area <= 1 {
        return mask.clone();
    }
    let (labels, n) = connected_components(mask);
    let mut areas = vec![0usize; n + 1];
    for &l in &labels {
        areas[l as usize] += 1;
    }
    let data = labels
        .iter()
        .map(|&l| l != 0 && areas[l as usize] >= min_area)
        .collect();
    BinaryMask::new(mask.width(), mask.height(), data).expect("shape preserved")
}
