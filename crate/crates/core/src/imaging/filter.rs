//! Linear filters: Gaussian smoothing, Sobel gradients, and box statistics.
//!
//! Every filter replicates edge pixels for out-of-bounds taps.

use super::raster::{GradientField, Image};
use crate::error::{ensure_param, Result};

/// Horizontal Sobel kernel; the vertical kernel is its transpose.
pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

/// Sampled Gaussian on `-radius..=radius`, normalized to sum 1.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Vec<f64>> {
    ensure_param(sigma.is_finite() && sigma > 0.0, || {
        format!("gaussian sigma must be positive, got {sigma}")
    })?;
    ensure_param(radius >= 1, || "gaussian radius must be at least 1".into())?;
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    Ok(k)
}

/// Separable correlation of a row-major buffer with a symmetric 1-D kernel.
pub(crate) fn separable(data: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (width as isize, height as isize);
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        let row = &data[y * width..(y + 1) * width];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let xx = (x + k as isize - r).clamp(0, w - 1) as usize;
                acc += kv * row[xx];
            }
            tmp[y * width + x as usize] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let yy = (y + k as isize - r).clamp(0, h - 1) as usize;
                acc += kv * tmp[yy * width + x];
            }
            out[y as usize * width + x] = acc;
        }
    }
    out
}

fn smooth_buffer(
    data: &[f64],
    width: usize,
    height: usize,
    sigma: f64,
    radius: usize,
) -> Result<Vec<f64>> {
    let kernel = gaussian_kernel(sigma, radius)?;
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let mut out = separable(data, width, height, &kernel);
    // A unit-sum non-negative kernel cannot leave the input range; rounding can.
    out.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    Ok(out)
}

/// Gaussian blur with a truncated kernel of the given radius.
pub fn gaussian_smooth(img: &Image, sigma: f64, radius: usize) -> Result<Image> {
    let data = smooth_buffer(img.as_slice(), img.width(), img.height(), sigma, radius)?;
    Image::new(img.width(), img.height(), data)
}

/// Gaussian blur of a gradient field.
pub fn smooth_field(field: &GradientField, sigma: f64, radius: usize) -> Result<GradientField> {
    let data = smooth_buffer(
        field.as_slice(),
        field.width(),
        field.height(),
        sigma,
        radius,
    )?;
    Ok(GradientField::from_raw(field.width(), field.height(), data))
}

/// Signed Sobel responses `(sx, sy)` of a raw buffer.
pub(crate) fn sobel_components(data: &[f64], width: usize, height: usize) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (width as isize, height as isize);
    let at = |x: isize, y: isize| data[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
    let mut sx = vec![0.0; data.len()];
    let mut sy = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            // Sum weighted differences so that flat regions give exact zeros.
            let (mut gx, mut gy) = (0.0, 0.0);
            for d in -1..=1isize {
                let weight = -SOBEL_X[(d + 1) as usize][0];
                gx += weight * (at(x + 1, y + d) - at(x - 1, y + d));
                gy += weight * (at(x + d, y + 1) - at(x + d, y - 1));
            }
            let i = (y * w + x) as usize;
            sx[i] = gx;
            sy[i] = gy;
        }
    }
    (sx, sy)
}

pub(crate) fn sobel_magnitude_raw(data: &[f64], width: usize, height: usize) -> Vec<f64> {
    let (sx, sy) = sobel_components(data, width, height);
    sx.iter().zip(&sy).map(|(a, b)| a.hypot(*b)).collect()
}

/// Gradient magnitude `sqrt(sx^2 + sy^2)` of the 3x3 Sobel responses.
pub fn sobel_gradient_magnitude(img: &Image) -> Result<GradientField> {
    ensure_param(img.width() >= 3 && img.height() >= 3, || {
        format!(
            "sobel needs at least 3x3, got {}x{}",
            img.width(),
            img.height()
        )
    })?;
    let data = sobel_magnitude_raw(img.as_slice(), img.width(), img.height());
    Ok(GradientField::from_raw(img.width(), img.height(), data))
}

/// Summed-area tables for O(1) box means and variances with edge replication.
///
/// The replicated border is materialised by padding the source by `pad`
/// pixels, so windows up to radius `pad` are exact.
pub(crate) struct BoxStats {
    pad: usize,
    stride: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl BoxStats {
    pub(crate) fn new(data: &[f64], width: usize, height: usize, pad: usize) -> Self {
        let pw = width + 2 * pad;
        let ph = height + 2 * pad;
        let stride = pw + 1;
        let mut sum = vec![0.0; stride * (ph + 1)];
        let mut sum_sq = vec![0.0; stride * (ph + 1)];
        for py in 0..ph {
            let sy = (py as isize - pad as isize).clamp(0, height as isize - 1) as usize;
            let (mut row, mut row_sq) = (0.0, 0.0);
            for px in 0..pw {
                let sx = (px as isize - pad as isize).clamp(0, width as isize - 1) as usize;
                let v = data[sy * width + sx];
                row += v;
                row_sq += v * v;
                let i = (py + 1) * stride + px + 1;
                sum[i] = sum[i - stride] + row;
                sum_sq[i] = sum_sq[i - stride] + row_sq;
            }
        }
        Self {
            pad,
            stride,
            sum,
            sum_sq,
        }
    }

    /// Mean and population standard deviation over the square of the given
    /// radius centred at `(x, y)`.
    pub(crate) fn mean_std(&self, x: usize, y: usize, radius: usize) -> (f64, f64) {
        debug_assert!(radius <= self.pad);
        let x0 = x + self.pad - radius;
        let y0 = y + self.pad - radius;
        let x1 = x + self.pad + radius + 1;
        let y1 = y + self.pad + radius + 1;
        let rect = |t: &[f64]| {
            t[y1 * self.stride + x1] - t[y0 * self.stride + x1] - t[y1 * self.stride + x0]
                + t[y0 * self.stride + x0]
        };
        let n = ((2 * radius + 1) * (2 * radius + 1)) as f64;
        let mean = rect(&self.sum) / n;
        let var = (rect(&self.sum_sq) / n - mean * mean).max(0.0);
        (mean, var.sqrt())
    }
}
