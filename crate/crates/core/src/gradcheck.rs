//! Central-difference gradient verification harness.
//!
//! The scalar probed is `<f(inputs), r>` for a seeded random `r`, so every
//! output element contributes. Error per element is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1)` and the harness
//! reports the maximum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph, Var};
use crate::models::{Mode, Model};
use crate::objective::hybrid_loss;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const MAX_ELEMENTS: usize = 10_000;
/// Step for whole-model checks. A network has thousands of ReLU and max-pool
/// kinks, and a wider step is likely to straddle one; in f64 the round-off
/// at this step is still around 1e-10.
pub const MODEL_FD_STEP: f64 = 1e-6;

/// Primitives exposed to [`grad_check`]. Input shapes are given in the order
/// documented on each variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    /// `[x, weight]`; bias is `[c_out]`.
    Conv3d { stride: usize, padding: usize },
    /// `[x, weight (c_in, c_out, 2, 2, 2)]`; bias is `[c_out]`.
    ConvTranspose3d,
    /// `[x]`
    MaxPool3d,
    /// `[x]`; gamma and beta are `[c]`.
    BatchNormTrain,
    /// `[x]`; fixed running statistics.
    BatchNormEval,
    /// `[x]`
    Relu,
    /// `[x]`
    Sigmoid,
    /// `[x]`
    GlobalAvgPool,
    /// `[a, b]`
    ConcatChannels,
    /// `[x]`; split into the given number of groups and re-concatenated.
    SplitGroups(usize),
    /// `[a, b]` with `b` equal-shaped, `(n, c)` or `(n, 1, d, h, w)`.
    Mul,
    /// `[a, b]` with `b` equal-shaped or `(n, c)`.
    Add,
    /// `[z (n, k), weight (m, k)]`; bias is `[m]`.
    Dense,
    /// `[x]`
    StandardizeSpatial,
    /// `[x]`; gamma and beta are `[c]`.
    ChannelAffine,
    /// `[x]`
    SumChannels,
}

/// Builds the primitive's inputs for the requested shapes.
fn inputs_for(p: Primitive, shapes: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    let need = match p {
        Primitive::Conv3d { .. } | Primitive::ConvTranspose3d | Primitive::ConcatChannels => 2,
        Primitive::Mul | Primitive::Add | Primitive::Dense => 2,
        _ => 1,
    };
    if shapes.len() != need {
        return Err(Error::Shape(format!(
            "{p:?} takes {need} input shapes, got {}",
            shapes.len()
        )));
    }
    let mut v: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, rng)).collect();
    match p {
        Primitive::Conv3d { .. } | Primitive::Dense => {
            let c = shapes[1][0];
            v.push(Tensor::randn(&[c], 1.0, rng));
        }
        Primitive::ConvTranspose3d => {
            let c = shapes[1][1];
            v.push(Tensor::randn(&[c], 1.0, rng));
        }
        Primitive::BatchNormTrain | Primitive::BatchNormEval | Primitive::ChannelAffine => {
            let c = shapes[0][1];
            v.push(Tensor::uniform(&[c], 0.5, 1.5, rng));
            v.push(Tensor::randn(&[c], 1.0, rng));
        }
        _ => {}
    }
    Ok(v)
}

fn apply(p: Primitive, g: &mut Graph, x: &[Var]) -> Result<Var> {
    match p {
        Primitive::Conv3d { stride, padding } => g.conv3d(x[0], x[1], x[2], stride, padding),
        Primitive::ConvTranspose3d => g.conv_transpose3d(x[0], x[1], x[2]),
        Primitive::MaxPool3d => g.maxpool3d(x[0]),
        Primitive::BatchNormTrain => Ok(g.batchnorm3d(x[0], x[1], x[2], BnMode::Train)?.0),
        Primitive::BatchNormEval => {
            let c = g.value(x[0]).shape()[1];
            let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
            let var: Vec<f64> = (0..c).map(|i| 1.0 + 0.5 * i as f64).collect();
            Ok(g.batchnorm3d(x[0], x[1], x[2], BnMode::Eval { mean: &mean, var: &var })?.0)
        }
        Primitive::Relu => g.relu(x[0]),
        Primitive::Sigmoid => g.sigmoid(x[0]),
        Primitive::GlobalAvgPool => g.global_avg_pool(x[0]),
        Primitive::ConcatChannels => g.concat_channels(&[x[0], x[1]]),
        Primitive::SplitGroups(groups) => {
            let parts = g.split_groups(x[0], groups)?;
            // Reverse the group order so the check is not a plain identity.
            let rev: Vec<Var> = parts.into_iter().rev().collect();
            g.concat_channels(&rev)
        }
        Primitive::Mul => g.mul(x[0], x[1]),
        Primitive::Add => g.add(x[0], x[1]),
        Primitive::Dense => g.dense(x[0], x[1], x[2]),
        Primitive::StandardizeSpatial => g.standardize_spatial(x[0]),
        Primitive::ChannelAffine => g.channel_affine(x[0], x[1], x[2]),
        Primitive::SumChannels => g.sum_channels(x[0]),
    }
}

/// Maximum relative error between analytic and central-difference gradients
/// of `primitive` on seeded random inputs of the given shapes.
pub fn grad_check(primitive: Primitive, shapes: &[Vec<usize>], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = inputs_for(primitive, shapes, &mut rng)?;
    check_function(&inputs, &mut rng, |g, vars| apply(primitive, g, vars))
}

/// Gradient check of an arbitrary graph-building closure over `inputs`.
pub fn check_function<F>(inputs: &[Tensor], rng: &mut ChaCha8Rng, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let total: usize = inputs.iter().map(Tensor::len).sum();
    if total > MAX_ELEMENTS {
        return Err(Error::Shape(format!(
            "gradient check limited to {MAX_ELEMENTS} input elements, got {total}"
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let probe = Tensor::randn(g.value(y).shape(), 1.0, rng);
    let grads = g.backward(y, probe.clone())?;

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        Ok(g.value(y).dot(&probe))
    };

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Gradient check of the training loss of a whole model with respect to all
/// trainable parameters (at most [`MAX_ELEMENTS`] of them). Batch norm runs in
/// training mode, so running statistics do not enter the loss.
pub fn model_grad_check(model: &Model, x: &Tensor, target: &Tensor) -> Result<f64> {
    let total: usize = model.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum();
    if total > MAX_ELEMENTS {
        return Err(Error::Shape(format!(
            "gradient check limited to {MAX_ELEMENTS} parameters, model has {total}"
        )));
    }
    let mut m = model.clone();
    m.set_mode(Mode::Train);
    m.zero_grad();
    let analytic = {
        let mut a = m.clone();
        a.loss_and_backward(x, target)?;
        a.params
    };
    let loss = |m: &Model| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let (y, _) = m.forward_graph(&mut g, xv)?;
        Ok(hybrid_loss(g.value(y), target)?.total)
    };
    let mut worst: f64 = 0.0;
    for (i, p) in analytic.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        for j in 0..p.value.len() {
            let orig = p.value.data()[j];
            let slot = |m: &mut Model, v: f64| m.params.iter_mut().nth(i).expect("same layout").value.data_mut()[j] = v;
            slot(&mut m, orig + MODEL_FD_STEP);
            let up = loss(&m)?;
            slot(&mut m, orig - MODEL_FD_STEP);
            let down = loss(&m)?;
            slot(&mut m, orig);
            let numeric = (up - down) / (2.0 * MODEL_FD_STEP);
            worst = worst.max(relative_error(p.grad.data()[j], numeric));
        }
    }
    Ok(worst)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}
