//! Hybrid Dice + binary cross-entropy loss on logits.
//!
//! Each loss comes with its analytic gradient with respect to the logits, which
//! seeds the reverse sweep through the network.

use crate::error::{Error, Result};
use crate::graph::sigmoid;
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub dice_term: f64,
    pub ce_term: f64,
}

fn check(logits: &Tensor, target: &Tensor) -> Result<()> {
    if logits.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "loss: logits {:?} and target {:?} differ",
            logits.shape(),
            target.shape()
        )));
    }
    if logits.shape().is_empty() || logits.is_empty() {
        return Err(Error::Shape("loss: empty tensor".into()));
    }
    if let Some(v) = target.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(format!("loss: target value {v} is not binary")));
    }
    Ok(())
}

/// Soft Dice loss per sample (leading axis), averaged over the batch.
pub fn dice_loss_with_grad(logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check(logits, target)?;
    let n = logits.shape()[0];
    let per = logits.len() / n;
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for s in 0..n {
        let z = &logits.data()[s * per..(s + 1) * per];
        let t = &target.data()[s * per..(s + 1) * per];
        let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        let psum: f64 = p.iter().sum();
        let tsum: f64 = t.iter().sum();
        let num = 2.0 * inter + DICE_EPS;
        let den = psum + tsum + DICE_EPS;
        loss += 1.0 - num / den;
        let g = &mut grad[s * per..(s + 1) * per];
        for i in 0..per {
            let dl_dp = -(2.0 * t[i] * den - num) / (den * den);
            g[i] = dl_dp * p[i] * (1.0 - p[i]) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::from_vec(logits.shape(), grad)?))
}

pub fn dice_loss(logits: &Tensor, target: &Tensor) -> Result<f64> {
    dice_loss_with_grad(logits, target).map(|(l, _)| l)
}

/// Voxel-mean binary cross-entropy in the overflow-free logit form.
pub fn bce_loss_with_grad(logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check(logits, target)?;
    let count = logits.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.data().iter().zip(target.data()) {
        total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        grad.push((sigmoid(z) - t) / count);
    }
    Ok((total / count, Tensor::from_vec(logits.shape(), grad)?))
}

pub fn bce_loss(logits: &Tensor, target: &Tensor) -> Result<f64> {
    bce_loss_with_grad(logits, target).map(|(l, _)| l)
}

/// Unweighted sum of the Dice and cross-entropy terms, with its logit gradient.
pub fn hybrid_loss_with_grad(logits: &Tensor, target: &Tensor) -> Result<(LossValue, Tensor)> {
    let (dice, mut grad) = dice_loss_with_grad(logits, target)?;
    let (ce, gce) = bce_loss_with_grad(logits, target)?;
    grad.add_assign(&gce);
    Ok((
        LossValue {
            total: dice + ce,
            dice_term: dice,
            ce_term: ce,
        },
        grad,
    ))
}

pub fn hybrid_loss(logits: &Tensor, target: &Tensor) -> Result<LossValue> {
    hybrid_loss_with_grad(logits, target).map(|(l, _)| l)
}
