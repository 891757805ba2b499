//! Composite layers on top of the autodiff primitives.
//!
//! Layers are plain functions of `(tape, params, prefix, input, ctx)`; all
//! state lives in the [`ParamStore`], so one store can serve many tapes at
//! once. Parameter names are `prefix.local`, e.g. `trunk.stem.conv.w`.

mod params;
mod resnet;
mod rnn;

pub use params::{count_params, init_params, Init, ParamSpec, ParamStore};
pub use resnet::{resnet14_forward, resnet14_specs, ResNetConfig, ShapeTrace, MIN_FRAMES};
pub use rnn::{rnn_forward, rnn_specs, RnnConfig, RnnKind};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Primitive, Tape, Tensor};
use crate::{Error, Real, Result};

/// Batch statistics observed by one normalization layer during a training
/// forward pass, to be folded into its running averages by the caller.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

/// Per-forward-pass mode: training (batch statistics, dropout) or eval.
#[derive(Debug)]
pub struct ForwardCtx {
    train: bool,
    rng: ChaCha8Rng,
    pub bn_updates: Vec<BnUpdate>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            bn_updates: Vec::new(),
        }
    }

    /// Training mode; `seed` drives the dropout masks.
    pub fn train(seed: u64) -> Self {
        ForwardCtx {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }
}

pub fn linear_specs(prefix: &str, inputs: usize, outputs: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.w"), &[inputs, outputs], Init::HeUniform { fan_in: inputs }),
        ParamSpec::new(format!("{prefix}.b"), &[outputs], Init::Constant(0.0)),
    ]
}

/// `x[T×in] · w[in×out] + b`.
pub fn linear(tape: &mut Tape, params: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = params.get(&format!("{prefix}.w"))?;
    let b = params.get(&format!("{prefix}.b"))?;
    if x.rank() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(Error::shape(format!(
            "`{prefix}` expects T×{}, got {:?}",
            w.shape()[0],
            x.shape()
        )));
    }
    let y = tape.matmul(x, w)?;
    tape.add_bias(&y, b)
}

/// Mean over frames of a `T×N` tensor.
pub fn time_avg_pool(tape: &mut Tape, frames: &Tensor) -> Result<Tensor> {
    if frames.rank() != 2 || frames.shape()[0] == 0 {
        return Err(Error::shape(format!(
            "time pooling needs a non-empty T×N tensor, got {:?}",
            frames.shape()
        )));
    }
    tape.mean(frames, Some(0))
}

/// Inverted dropout in training mode, identity otherwise.
pub fn dropout(tape: &mut Tape, x: &Tensor, rate: Real, ctx: &mut ForwardCtx) -> Result<Tensor> {
    if !ctx.train || rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate as f64;
    let mask: Vec<Real> = (0..x.numel())
        .map(|_| if ctx.rng.gen_bool(keep) { 1.0 } else { 0.0 })
        .collect();
    let mask = Tensor::constant(x.shape(), mask)?;
    tape.apply(Primitive::Dropout { rate }, &[x, &mask])
}

pub fn batch_norm_specs(prefix: &str, channels: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gamma"), &[channels], Init::Constant(1.0)),
        ParamSpec::new(format!("{prefix}.beta"), &[channels], Init::Constant(0.0)),
        ParamSpec::buffer(format!("{prefix}.running_mean"), &[channels], 0.0),
        ParamSpec::buffer(format!("{prefix}.running_var"), &[channels], 1.0),
    ]
}

/// Batch normalization of `x[1×C×H×W]`: the utterance's own statistics in
/// training, the running averages in eval.
pub fn batch_norm(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    x: &Tensor,
    eps: Real,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    let gamma = params.get(&format!("{prefix}.gamma"))?;
    let beta = params.get(&format!("{prefix}.beta"))?;
    if ctx.train {
        let c = x.shape()[1];
        let inner: usize = x.shape()[2..].iter().product();
        let (mean, var) = crate::autodiff::channel_stats(x.data(), c, inner);
        ctx.bn_updates.push(BnUpdate {
            prefix: prefix.to_string(),
            mean,
            var,
        });
        let normed = tape.apply(Primitive::ChannelNorm { eps }, &[x])?;
        tape.apply(Primitive::AffineChannel, &[&normed, gamma, beta])
    } else {
        // gamma·(x − μ)/σ + beta folded into one per-channel scale and shift.
        let rm = params.get(&format!("{prefix}.running_mean"))?;
        let rv = params.get(&format!("{prefix}.running_var"))?;
        let inv_std: Vec<Real> = rv.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let inv_std = Tensor::constant(rv.shape(), inv_std)?;
        let neg_mean = Tensor::constant(rm.shape(), rm.data().iter().map(|m| -m).collect())?;
        let scale = tape.mul(gamma, &inv_std)?;
        let offset = tape.mul(&scale, &neg_mean)?;
        let shift = tape.add(beta, &offset)?;
        tape.apply(Primitive::AffineChannel, &[x, &scale, &shift])
    }
}

/// Folds recorded batch statistics into the running buffers:
/// `running ← (1 − momentum)·running + momentum·batch`.
pub fn apply_bn_updates(params: &mut ParamStore, updates: &[BnUpdate], momentum: Real) -> Result<()> {
    for u in updates {
        for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            let name = format!("{}.{suffix}", u.prefix);
            let t = params.get_mut(&name)?;
            if t.numel() != batch.len() {
                return Err(Error::shape(format!("batch statistics do not fit `{name}`")));
            }
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
