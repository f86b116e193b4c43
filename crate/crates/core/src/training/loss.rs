//! Binary segmentation losses on logits.

use crate::error::{Error, Result};
use crate::ops::sigmoid_scalar;
use crate::tensor::Tensor;

/// Smoothing constant of the soft-Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

fn check_target(logits: &Tensor, target: &Tensor) -> Result<()> {
    logits.expect_same_dims(target)?;
    if let Some(bad) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::InvalidTarget(format!(
            "targets must be 0 or 1, found {}",
            bad
        )));
    }
    Ok(())
}

/// `-[t log s(z) + (1 - t) log(1 - s(z))]` in the overflow-free form
/// `max(z, 0) - z t + log(1 + exp(-|z|))`.
#[inline]
fn bce_term(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy over all pixels.
pub fn bce_loss(logits: &Tensor, target: &Tensor) -> Result<f64> {
    check_target(logits, target)?;
    let total: f64 = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &t)| bce_term(z, t))
        .sum();
    Ok(total / logits.len() as f64)
}

pub fn bce_loss_grad(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_target(logits, target)?;
    let n = logits.len() as f64;
    logits.zip_map(target, |z, t| (sigmoid_scalar(z) - t) / n)
}

/// `1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)` for probabilities `p`.
pub fn soft_dice(probs: &[f64], target: &[f64], smooth: f64) -> f64 {
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in probs.iter().zip(target) {
        inter += p * t;
        sp += p;
        st += t;
    }
    1.0 - (2.0 * inter + smooth) / (sp + st + smooth)
}

/// Soft-Dice loss with `p = sigmoid(logits)` and smoothing [`DICE_SMOOTH`].
pub fn dice_loss(logits: &Tensor, target: &Tensor) -> Result<f64> {
    dice_loss_smooth(logits, target, DICE_SMOOTH)
}

pub fn dice_loss_smooth(logits: &Tensor, target: &Tensor, smooth: f64) -> Result<f64> {
    check_target(logits, target)?;
    let p: Vec<f64> = logits.data().iter().map(|&z| sigmoid_scalar(z)).collect();
    Ok(soft_dice(&p, target.data(), smooth))
}

pub fn dice_loss_grad(logits: &Tensor, target: &Tensor, smooth: f64) -> Result<Tensor> {
    check_target(logits, target)?;
    let p: Vec<f64> = logits.data().iter().map(|&z| sigmoid_scalar(z)).collect();
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&pi, &ti) in p.iter().zip(target.data()) {
        inter += pi * ti;
        sp += pi;
        st += ti;
    }
    let num = 2.0 * inter + smooth;
    let den = sp + st + smooth;
    let grad: Vec<f64> = p
        .iter()
        .zip(target.data())
        .map(|(&pi, &ti)| {
            // d(loss)/dp = -(2 t den - num) / den^2, then chain through the sigmoid
            let dp = -(2.0 * ti * den - num) / (den * den);
            dp * pi * (1.0 - pi)
        })
        .collect();
    Tensor::new(logits.dims().to_vec(), grad)
}
