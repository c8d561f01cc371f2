//! Row-major raster containers.
//!
//! All rasters store `width * height` samples in row-major order. Pixel
//! `(x, y)` lives at index `y * width + x`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_param, Error, Result};

/// Label value for unannotated pixels. Excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;
/// Label value for background pixels.
pub const BACKGROUND: u8 = 0;
/// Number of foreground classes.
pub const N_CLASSES: usize = 3;
/// Foreground classes plus background.
pub const N_OUTPUTS: usize = N_CLASSES + 1;

macro_rules! raster_common {
    ($name:ident, $elem:ty) => {
        impl $name {
            #[inline]
            pub fn width(&self) -> usize {
                self.width
            }

            #[inline]
            pub fn height(&self) -> usize {
                self.height
            }

            #[inline]
            pub fn shape(&self) -> (usize, usize) {
                (self.width, self.height)
            }

            #[inline]
            pub fn len(&self) -> usize {
                self.data.len()
            }

            #[inline]
            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            #[inline]
            pub fn get(&self, x: usize, y: usize) -> $elem {
                self.data[y * self.width + x]
            }

            /// Sample with edge replication for out-of-range coordinates.
            #[inline]
            pub fn get_clamped(&self, x: isize, y: isize) -> $elem {
                let x = x.clamp(0, self.width as isize - 1) as usize;
                let y = y.clamp(0, self.height as isize - 1) as usize;
                self.data[y * self.width + x]
            }

            #[inline]
            pub fn as_slice(&self) -> &[$elem] {
                &self.data
            }

            pub fn into_vec(self) -> Vec<$elem> {
                self.data
            }

            #[allow(dead_code)] // not every raster type compares shapes
            pub(crate) fn check_same_shape(&self, other: (usize, usize)) -> Result<()> {
                if self.shape() == other {
                    Ok(())
                } else {
                    Err(Error::ShapeMismatch {
                        expected: self.shape(),
                        actual: other,
                    })
                }
            }

            /// Copies the `w x h` window whose top-left corner is `(x0, y0)`.
            pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
                ensure_param(w >= 1 && h >= 1, || "crop must be at least 1x1".into())?;
                ensure_param(x0 + w <= self.width && y0 + h <= self.height, || {
                    format!(
                        "crop {}x{}+{}+{} exceeds {}x{} raster",
                        w, h, x0, y0, self.width, self.height
                    )
                })?;
                let mut data = Vec::with_capacity(w * h);
                for y in y0..y0 + h {
                    let row = y * self.width;
                    data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
                }
                Ok(Self {
                    width: w,
                    height: h,
                    data,
                })
            }

            pub fn flip_horizontal(&self) -> Self {
                let mut data = self.data.clone();
                for row in data.chunks_mut(self.width) {
                    row.reverse();
                }
                Self {
                    width: self.width,
                    height: self.height,
                    data,
                }
            }

            pub fn flip_vertical(&self) -> Self {
                let mut data = Vec::with_capacity(self.data.len());
                for row in self.data.chunks(self.width).rev() {
                    data.extend_from_slice(row);
                }
                Self {
                    width: self.width,
                    height: self.height,
                    data,
                }
            }
        }
    };
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    ensure_param(width >= 1 && height >= 1, || {
        format!("raster dimensions must be positive, got {width}x{height}")
    })?;
    ensure_param(width * height == len, || {
        format!(
            "{width}x{height} raster needs {} samples, got {len}",
            width * height
        )
    })
}

/// Single-channel intensity image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

raster_common!(Image, f64);

impl Image {
    /// Builds an image, rejecting non-finite or out-of-range samples.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        if let Some(bad) = data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidParameter(format!(
                "image sample {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image, clamping samples into `[0, 1]`. NaN maps to 0.
    pub fn from_clamped(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Non-negative gradient magnitudes (or any derived non-negative field).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

raster_common!(GradientField, f64);

impl GradientField {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gradient sample {bad} is negative or non-finite"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(width * height, data.len());
        Self {
            width,
            height,
            data,
        }
    }
}

/// Foreground (`true`) / background (`false`) partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

raster_common!(BinaryMask, bool);

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    /// Intersection over union of the `true` sets. Two empty masks score 1.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        self.check_same_shape(other.shape())?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        Ok(if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        })
    }
}

/// Per-pixel class indices: 0 background, 1..=3 cell classes, 255 ignore.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

raster_common!(LabelMap, u8);

/// Whether `v` is a legal label value.
pub fn is_legal_label(v: u8) -> bool {
    (v as usize) <= N_CLASSES || v == IGNORE_LABEL
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        if let Some(bad) = data.iter().find(|v| !is_legal_label(**v)) {
            return Err(Error::InvalidParameter(format!(
                "illegal label value {bad}"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![BACKGROUND; width * height])
    }

    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        debug_assert!(is_legal_label(value));
        self.data[y * self.width + x] = value;
    }

    /// Number of pixels that are neither background nor ignore.
    pub fn foreground_count(&self) -> usize {
        self.data
            .iter()
            .filter(|&&v| v != BACKGROUND && v != IGNORE_LABEL)
            .count()
    }

    pub fn contains_ignore(&self) -> bool {
        self.data.contains(&IGNORE_LABEL)
    }

    /// `true` wherever the label is a cell class.
    pub fn foreground_mask(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| v != BACKGROUND && v != IGNORE_LABEL)
                .collect(),
        }
    }

    /// Pixel counts per label value `0..=N_CLASSES`; ignore is not counted.
    pub fn class_histogram(&self) -> [usize; N_OUTPUTS] {
        let mut hist = [0usize; N_OUTPUTS];
        for &v in &self.data {
            if let Some(slot) = hist.get_mut(v as usize) {
                *slot += 1;
            }
        }
        hist
    }
}
