//! Soft Tversky loss with its analytic gradient.
//!
//! Per output `c` (background included), with soft counts over non-ignore
//! pixels `TP = sum p t`, `FN = sum (1 - p) t`, `FP = sum p (1 - t)`:
//!
//! `TI_c = (TP + eps) / (TP + alpha FN + beta FP + eps)`
//!
//! and the loss is the mean of `1 - TI_c` over outputs.

use serde::{Deserialize, Serialize};

use super::model::ProbabilityMap;
use crate::error::{ensure_param, Error, Result};
use crate::imaging::{LabelMap, IGNORE_LABEL, N_OUTPUTS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TverskyParams {
    pub alpha: f64,
    pub beta: f64,
    pub smooth: f64,
}

impl Default for TverskyParams {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
            smooth: 1.0,
        }
    }
}

impl TverskyParams {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_param(
            (0.0..=1.0).contains(&self.alpha) && (0.0..=1.0).contains(&self.beta),
            || {
                format!(
                    "tversky alpha and beta must lie in [0, 1], got {} and {}",
                    self.alpha, self.beta
                )
            },
        )?;
        ensure_param(self.alpha + self.beta > 0.0, || {
            "tversky alpha + beta must be positive".into()
        })?;
        ensure_param(self.smooth > 0.0 && self.smooth.is_finite(), || {
            "tversky smoothing must be positive".into()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TverskyOutput {
    pub loss: f64,
    /// Tversky index per output, background first.
    pub index: [f64; N_OUTPUTS],
    /// `dloss / dscore`, laid out like the probabilities; zero on ignore pixels.
    pub grad_scores: Vec<f64>,
}

/// Loss over flat pixel-major probabilities (`N_OUTPUTS` per pixel).
pub(crate) fn tversky_flat(
    probs: &[f64],
    targets: &[u8],
    params: &TverskyParams,
) -> Result<TverskyOutput> {
    params.validate()?;
    ensure_param(probs.len() == targets.len() * N_OUTPUTS, || {
        "probability and target sizes differ".into()
    })?;
    let (a, b, eps) = (params.alpha, params.beta, params.smooth);

    let mut tp = [0.0; N_OUTPUTS];
    let mut p_sum = [0.0; N_OUTPUTS];
    let mut t_sum = [0.0; N_OUTPUTS];
    let mut counted = 0usize;
    for (p, &t) in probs.chunks(N_OUTPUTS).zip(targets) {
        if t == IGNORE_LABEL {
            continue;
        }
        counted += 1;
        for c in 0..N_OUTPUTS {
            p_sum[c] += p[c];
        }
        tp[t as usize] += p[t as usize];
        t_sum[t as usize] += 1.0;
    }
    if counted == 0 {
        return Err(Error::DegenerateInput(
            "tversky target is entirely ignore".into(),
        ));
    }

    let mut index = [0.0; N_OUTPUTS];
    let mut num = [0.0; N_OUTPUTS];
    let mut den = [0.0; N_OUTPUTS];
    for c in 0..N_OUTPUTS {
        let fn_ = t_sum[c] - tp[c];
        let fp = p_sum[c] - tp[c];
        num[c] = tp[c] + eps;
        den[c] = tp[c] + a * fn_ + b * fp + eps;
        index[c] = num[c] / den[c];
    }
    let k = N_OUTPUTS as f64;
    let loss = index.iter().map(|ti| 1.0 - ti).sum::<f64>() / k;

    // dTI/dp for a pixel of class t is (t D - N (t (1 - a) + b (1 - t))) / D^2.
    let mut d_on = [0.0; N_OUTPUTS];
    let mut d_off = [0.0; N_OUTPUTS];
    for c in 0..N_OUTPUTS {
        let d2 = den[c] * den[c];
        d_on[c] = -(den[c] - num[c] * (1.0 - a)) / (d2 * k);
        d_off[c] = num[c] * b / (d2 * k);
    }

    let mut grad_scores = vec![0.0; probs.len()];
    for ((p, &t), g) in probs
        .chunks(N_OUTPUTS)
        .zip(targets)
        .zip(grad_scores.chunks_mut(N_OUTPUTS))
    {
        if t == IGNORE_LABEL {
            continue;
        }
        let mut dp = [0.0; N_OUTPUTS];
        for c in 0..N_OUTPUTS {
            dp[c] = if c == t as usize { d_on[c] } else { d_off[c] };
        }
        let inner: f64 = (0..N_OUTPUTS).map(|c| p[c] * dp[c]).sum();
        for c in 0..N_OUTPUTS {
            g[c] = p[c] * (dp[c] - inner);
        }
    }
    Ok(TverskyOutput {
        loss,
        index,
        grad_scores,
    })
}

/// Tversky loss of a probability map against a label map.
pub fn tversky_loss(
    pred: &ProbabilityMap,
    target: &LabelMap,
    params: &TverskyParams,
) -> Result<TverskyOutput> {
    target.check_same_shape(pred.shape())?;
    tversky_flat(pred.as_slice(), target.as_slice(), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::segmenter::model::softmax;
    use proptest::prelude::*;
    use rand::Rng;

    fn probs_from_scores(scores: &[f64]) -> Vec<f64> {
        let mut p = scores.to_vec();
        p.chunks_mut(N_OUTPUTS).for_each(softmax);
        p
    }

    fn loss_of_scores(scores: &[f64], targets: &[u8], params: &TverskyParams) -> f64 {
        tversky_flat(&probs_from_scores(scores), targets, params)
            .unwrap()
            .loss
    }

    fn soft_dice_loss(probs: &[f64], targets: &[u8], eps: f64) -> f64 {
        let mut total = 0.0;
        for c in 0..N_OUTPUTS {
            let (mut inter, mut p, mut t) = (0.0, 0.0, 0.0);
            for (px, &lab) in probs.chunks(N_OUTPUTS).zip(targets) {
                if lab == IGNORE_LABEL {
                    continue;
                }
                let tc = if lab as usize == c { 1.0 } else { 0.0 };
                inter += px[c] * tc;
                p += px[c];
                t += tc;
            }
            total += 1.0 - (2.0 * inter + 2.0 * eps) / (p + t + 2.0 * eps);
        }
        total / N_OUTPUTS as f64
    }

    #[test]
    fn perfect_prediction_has_small_loss() {
        let n = 100 * 100;
        let targets: Vec<u8> = (0..n).map(|i| (i % 4) as u8).collect();
        let mut probs = vec![0.0; n * N_OUTPUTS];
        for (i, &t) in targets.iter().enumerate() {
            probs[i * N_OUTPUTS + t as usize] = 1.0;
        }
        let out = tversky_flat(&probs, &targets, &TverskyParams::default()).unwrap();
        assert!(out.loss < 0.01);
        assert!(out.loss >= 0.0);
    }

    #[test]
    fn uniform_prediction_matches_soft_counts() {
        // Four equal class areas of 25 pixels each.
        let targets: Vec<u8> = (0..100).map(|i| (i / 25) as u8).collect();
        let probs = vec![0.25; 400];
        let params = TverskyParams::new(0.5, 0.5);
        let out = tversky_flat(&probs, &targets, &params).unwrap();
        let tp = 25.0 * 0.25;
        let fn_ = 25.0 * 0.75;
        let fp = 75.0 * 0.25;
        let ti = (tp + 1.0) / (tp + 0.5 * (fn_ + fp) + 1.0);
        for c in 0..N_OUTPUTS {
            assert!((out.index[c] - ti).abs() < 1e-12);
        }
        assert!((out.loss - (1.0 - ti)).abs() < 1e-12);
    }

    #[test]
    fn all_ignore_is_degenerate() {
        let err =
            tversky_flat(&[0.25; 8], &[IGNORE_LABEL; 2], &TverskyParams::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateInput(_)));
    }

    #[test]
    fn ignore_pixels_do_not_contribute() {
        let probs = vec![0.7, 0.1, 0.1, 0.1, 0.1, 0.2, 0.3, 0.4];
        let with = tversky_flat(&probs, &[0, IGNORE_LABEL], &TverskyParams::default()).unwrap();
        let without = tversky_flat(&probs[..4], &[0], &TverskyParams::default()).unwrap();
        assert_eq!(with.loss, without.loss);
        assert!(with.grad_scores[4..].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn invalid_parameters_rejected() {
        let p = [0.25; 4];
        assert!(tversky_flat(&p, &[0], &TverskyParams::new(0.0, 0.0)).is_err());
        assert!(tversky_flat(&p, &[0], &TverskyParams::new(1.5, 0.0)).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let params = TverskyParams::default();
        for trial in 0..25u64 {
            let mut r = rng::stream(11, "tversky-fd", trial);
            let n = 64;
            let scores: Vec<f64> = (0..n * N_OUTPUTS)
                .map(|_| r.random_range(-3.0..3.0))
                .collect();
            let targets: Vec<u8> = (0..n)
                .map(|_| {
                    if r.random_bool(0.1) {
                        IGNORE_LABEL
                    } else {
                        r.random_range(0..4u8)
                    }
                })
                .collect();
            let out = tversky_flat(&probs_from_scores(&scores), &targets, &params).unwrap();
            let h = 1e-5;
            for i in 0..scores.len() {
                let mut up = scores.clone();
                let mut down = scores.clone();
                up[i] += h;
                down[i] -= h;
                let fd = (loss_of_scores(&up, &targets, &params)
                    - loss_of_scores(&down, &targets, &params))
                    / (2.0 * h);
                let g = out.grad_scores[i];
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
                assert!(
                    rel <= 1e-4,
                    "trial {trial} index {i}: analytic {g} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn half_weights_reduce_to_soft_dice() {
        let params = TverskyParams::new(0.5, 0.5);
        for trial in 0..20u64 {
            let mut r = rng::stream(5, "dice", trial);
            let scores: Vec<f64> = (0..64 * N_OUTPUTS)
                .map(|_| r.random_range(-4.0..4.0))
                .collect();
            let probs = probs_from_scores(&scores);
            let targets: Vec<u8> = (0..64).map(|_| r.random_range(0..4u8)).collect();
            let ours = tversky_flat(&probs, &targets, &params).unwrap().loss;
            assert!((ours - soft_dice_loss(&probs, &targets, 1.0)).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn loss_is_in_unit_interval(
            scores in proptest::collection::vec(-20.0f64..20.0, 4 * 16),
            targets in proptest::collection::vec(0u8..4, 16),
            alpha in 0.0f64..=1.0,
            beta in 0.01f64..=1.0,
        ) {
            let out = tversky_flat(&probs_from_scores(&scores), &targets, &TverskyParams::new(alpha, beta)).unwrap();
            prop_assert!((0.0..=1.0).contains(&out.loss));
        }
    }
}
