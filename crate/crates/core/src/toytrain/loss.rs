//! Segmentation losses over channel-major `C×H×W` probability grids,
//! flattened to slices. Each loss has a value-only and a value+gradient form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DICE_SMOOTHING: f64 = 1e-5;
pub const BCE_CLAMP: f64 = 1e-7;

/// Weights of the combined loss `λ1·Dice + λ2·BCE`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for HybridWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

fn check_shapes(what: &'static str, pred: &[f64], target: &[f64], channels: usize) -> Result<()> {
    if channels == 0
        || pred.len() != target.len()
        || !pred.len().is_multiple_of(channels)
        || pred.is_empty()
    {
        return Err(Error::dim(
            what,
            format!("equal non-empty lengths divisible by {channels} channels"),
            format!("pred {}, target {}", pred.len(), target.len()),
        ));
    }
    Ok(())
}

/// Soft Dice loss: `1 − mean_c (2·Σ p·t + s)/(Σ p + Σ t + s)`.
pub fn dice_loss(pred: &[f64], target: &[f64], channels: usize) -> Result<f64> {
    dice_impl(pred, target, channels, false).map(|(v, _)| v)
}

pub fn dice_loss_with_grad(
    pred: &[f64],
    target: &[f64],
    channels: usize,
) -> Result<(f64, Vec<f64>)> {
    dice_impl(pred, target, channels, true)
}

fn dice_impl(
    pred: &[f64],
    target: &[f64],
    channels: usize,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    check_shapes("dice_loss", pred, target, channels)?;
    if let Some(bad) = pred.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!(
            "dice_loss: prediction {bad} outside [0, 1]"
        )));
    }
    let per = pred.len() / channels;
    let s = DICE_SMOOTHING;
    let mut grad = if want_grad {
        vec![0.0; pred.len()]
    } else {
        Vec::new()
    };
    let mut total = 0.0;
    for c in 0..channels {
        let p = &pred[c * per..(c + 1) * per];
        let t = &target[c * per..(c + 1) * per];
        let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        let sp: f64 = p.iter().sum();
        let st: f64 = t.iter().sum();
        let num = 2.0 * inter + s;
        let den = sp + st + s;
        total += num / den;
        if want_grad {
            let g = &mut grad[c * per..(c + 1) * per];
            let scale = -1.0 / (channels as f64 * den * den);
            for (gi, ti) in g.iter_mut().zip(t) {
                *gi = scale * (2.0 * ti * den - num);
            }
        }
    }
    Ok((1.0 - total / channels as f64, grad))
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    bce_impl(pred, target, false).map(|(v, _)| v)
}

/// Gradient is zero where the clamp is active.
pub fn bce_loss_with_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    bce_impl(pred, target, true)
}

fn bce_impl(pred: &[f64], target: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
    check_shapes("bce_loss", pred, target, 1)?;
    let n = pred.len() as f64;
    let mut grad = if want_grad {
        vec![0.0; pred.len()]
    } else {
        Vec::new()
    };
    let mut sum = 0.0;
    for (i, (&p, &t)) in pred.iter().zip(target).enumerate() {
        if p.is_nan() {
            return Err(Error::NonFinite {
                what: "bce_loss prediction".into(),
            });
        }
        let q = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        sum -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        if want_grad && q == p {
            grad[i] = (-t / q + (1.0 - t) / (1.0 - q)) / n;
        }
    }
    Ok((sum / n, grad))
}

pub fn hybrid_loss(pred: &[f64], target: &[f64], channels: usize, w: HybridWeights) -> Result<f64> {
    Ok(w.lambda1 * dice_loss(pred, target, channels)? + w.lambda2 * bce_loss(pred, target)?)
}

pub fn hybrid_loss_with_grad(
    pred: &[f64],
    target: &[f64],
    channels: usize,
    w: HybridWeights,
) -> Result<(f64, Vec<f64>)> {
    let (d, mut gd) = dice_loss_with_grad(pred, target, channels)?;
    let (b, gb) = bce_loss_with_grad(pred, target)?;
    for (x, y) in gd.iter_mut().zip(gb) {
        *x = w.lambda1 * *x + w.lambda2 * y;
    }
    Ok((w.lambda1 * d + w.lambda2 * b, gd))
}
