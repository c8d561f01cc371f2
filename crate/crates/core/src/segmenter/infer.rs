//! Sliding-window inference with probability averaging over overlaps.

use rayon::prelude::*;

use super::model::{forward, PixelClassifier, ProbabilityMap};
use crate::error::{ensure_param, Result};
use crate::imaging::{Image, LabelMap, N_OUTPUTS};

/// Window origins along one axis: every `stride` from 0, plus a final window
/// flush with the far edge when the grid does not reach it.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = len - window;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().expect("at least one window") != last {
        starts.push(last);
    }
    starts
}

fn check_window(img: &Image, window: usize, stride: usize) -> Result<()> {
    ensure_param(window >= 1 && stride >= 1, || {
        "window and stride must be positive".into()
    })?;
    ensure_param(window <= img.width() && window <= img.height(), || {
        format!(
            "window {window} exceeds image {}x{}",
            img.width(),
            img.height()
        )
    })?;
    ensure_param(stride <= window, || {
        format!("stride {stride} exceeds window {window}")
    })
}

/// Averaged class probabilities over all windows covering each pixel.
pub fn sliding_window_probs(
    model: &PixelClassifier,
    img: &Image,
    window: usize,
    stride: usize,
) -> Result<ProbabilityMap> {
    check_window(img, window, stride)?;
    let (w, h) = img.shape();
    let xs = window_starts(w, window, stride);
    let ys = window_starts(h, window, stride);
    let origins: Vec<(usize, usize)> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect();
    let tiles = origins
        .par_iter()
        .map(|&(x, y)| forward(model, &img.crop(x, y, window, window)?))
        .collect::<Result<Vec<_>>>()?;

    let mut sum = vec![0.0; w * h * N_OUTPUTS];
    let mut count = vec![0u32; w * h];
    for (&(x0, y0), tile) in origins.iter().zip(&tiles) {
        for ty in 0..window {
            for tx in 0..window {
                let i = (y0 + ty) * w + x0 + tx;
                count[i] += 1;
                let p = tile.pixel(ty * window + tx);
                for k in 0..N_OUTPUTS {
                    sum[i * N_OUTPUTS + k] += p[k];
                }
            }
        }
    }
    for (px, &c) in sum.chunks_mut(N_OUTPUTS).zip(&count) {
        if c > 1 {
            px.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    ProbabilityMap::new(w, h, sum)
}

pub fn sliding_window_infer(
    model: &PixelClassifier,
    img: &Image,
    window: usize,
    stride: usize,
) -> Result<LabelMap> {
    Ok(sliding_window_probs(model, img, window, stride)?.argmax())
}
