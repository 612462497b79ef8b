//! Image and sequence quality metrics: mean squared error, mean absolute
//! error, and structural similarity (SSIM).
//!
//! SSIM slides an 11×11 Gaussian window (σ = 1.5, weights normalized to sum
//! 1) over every position where the window fits entirely, computes the usual
//! luminance/contrast/structure ratio per window with C1 = (0.01·L)² and
//! C2 = (0.03·L)² at dynamic range L = 1, and averages over positions and
//! channels. Images too small for the window fall back to one global
//! uniform window; the report flags that so callers can warn.

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::config(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared difference over all elements.
pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// Mean absolute difference over all elements.
pub fn mae(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.len() as f64)
}

fn gaussian_window() -> Vec<f64> {
    let half = (WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(WINDOW * WINDOW);
    for r in 0..WINDOW {
        for c in 0..WINDOW {
            let dr = r as f64 - half;
            let dc = c as f64 - half;
            w.push((-(dr * dr + dc * dc) / (2.0 * SIGMA * SIGMA)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= total;
    }
    w
}

fn window_score(
    a: &ImageTensor,
    b: &ImageTensor,
    ch: usize,
    top: usize,
    left: usize,
    rows: usize,
    cols: usize,
    weights: &[f64],
) -> f64 {
    let mut mu_a = 0.0;
    let mut mu_b = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    let mut ab = 0.0;
    let mut idx = 0;
    for r in 0..rows {
        for c in 0..cols {
            let w = weights[idx];
            idx += 1;
            let x = a.get(top + r, left + c, ch);
            let y = b.get(top + r, left + c, ch);
            mu_a += w * x;
            mu_b += w * y;
            aa += w * x * x;
            bb += w * y * y;
            ab += w * x * y;
        }
    }
    let var_a = aa - mu_a * mu_a;
    let var_b = bb - mu_b * mu_b;
    let cov = ab - mu_a * mu_b;
    ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
        / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2))
}

/// SSIM plus a flag marking the small-image fallback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimScore {
    pub value: f64,
    /// True when the image was smaller than the standard window and one
    /// global uniform window was used instead.
    pub window_fallback: bool,
}

/// Structural similarity, averaged over valid window positions and channels.
pub fn ssim_detailed(a: &ImageTensor, b: &ImageTensor) -> Result<SsimScore> {
    check_same_shape(a, b)?;
    let (h, w, channels) = a.shape();
    if h < WINDOW || w < WINDOW {
        let weights = vec![1.0 / (h * w) as f64; h * w];
        let mut total = 0.0;
        for ch in 0..channels {
            total += window_score(a, b, ch, 0, 0, h, w, &weights);
        }
        return Ok(SsimScore { value: total / channels as f64, window_fallback: true });
    }
    let weights = gaussian_window();
    let mut total = 0.0;
    let positions = (h - WINDOW + 1) * (w - WINDOW + 1);
    for ch in 0..channels {
        let mut acc = 0.0;
        for top in 0..=h - WINDOW {
            for left in 0..=w - WINDOW {
                acc += window_score(a, b, ch, top, left, WINDOW, WINDOW, &weights);
            }
        }
        total += acc / positions as f64;
    }
    Ok(SsimScore { value: total / channels as f64, window_fallback: false })
}

/// Structural similarity value alone.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(ssim_detailed(a, b)?.value)
}

/// Per-frame metric triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetrics {
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
}

/// Metrics for a predicted sequence: one row per frame pair plus the
/// across-frame means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
    pub ssim_window_fallback: bool,
}

/// Compare paired frame lists (frame-by-frame, then averaged).
pub fn evaluate_frames(predicted: &[ImageTensor], actual: &[ImageTensor]) -> Result<MetricReport> {
    if predicted.len() != actual.len() || predicted.is_empty() {
        return Err(Error::config(format!(
            "cannot compare {} predictions against {} frames",
            predicted.len(),
            actual.len()
        )));
    }
    let mut frames = Vec::with_capacity(predicted.len());
    let mut fallback = false;
    for (p, a) in predicted.iter().zip(actual) {
        let s = ssim_detailed(p, a)?;
        fallback |= s.window_fallback;
        frames.push(FrameMetrics { mse: mse(p, a)?, mae: mae(p, a)?, ssim: s.value });
    }
    let count = frames.len() as f64;
    Ok(MetricReport {
        mse: frames.iter().map(|f| f.mse).sum::<f64>() / count,
        mae: frames.iter().map(|f| f.mae).sum::<f64>() / count,
        ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / count,
        ssim_window_fallback: fallback,
        frames,
    })
}
