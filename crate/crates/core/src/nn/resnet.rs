//! ResNet14 trunk over `1×1×T×40` log-mel input.
//!
//! Stem: 7×7 conv, stride 2 on both axes, then a 3×3/2 max-pool, giving
//! `⌈T/4⌉ × c1 × 10`. Four residual stages follow; each stage's first block
//! halves the frequency axis (10→5→3→2→1) and keeps time, with a 1×1
//! projection on its skip path. The final `c4 × ⌈T/4⌉ × 1` map is squeezed
//! into per-frame `c4`-dim vectors.

use serde::{Deserialize, Serialize};

use super::{batch_norm, batch_norm_specs, ForwardCtx, Init, ParamSpec, ParamStore};
use crate::autodiff::{Primitive, Tape, Tensor};
use crate::{Error, Real, Result};

/// Shortest input the trunk accepts.
pub const MIN_FRAMES: usize = 8;

const STEM_KERNEL: usize = 7;
const STEM_STRIDE: usize = 2;
const STEM_PAD: usize = 3;
const POOL_KERNEL: usize = 3;
const POOL_STRIDE: usize = 2;
const POOL_PAD: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub channels: [usize; 4],
    pub blocks: [usize; 4],
    pub input_dim: usize,
    /// Replace batch normalization with plain conv biases.
    pub no_bn: bool,
    pub bn_eps: Real,
}

impl ResNetConfig {
    pub fn full() -> Self {
        ResNetConfig {
            channels: [64, 128, 256, 512],
            blocks: [2, 2, 1, 1],
            input_dim: 40,
            no_bn: false,
            bn_eps: 1e-5,
        }
    }

    pub fn micro() -> Self {
        ResNetConfig {
            channels: [8, 16, 32, 64],
            ..Self::full()
        }
    }

    pub fn output_dim(&self) -> usize {
        self.channels[3]
    }

    /// Frame count after the stem: `⌈T/4⌉`.
    pub fn output_frames(frames: usize) -> usize {
        frames.div_ceil(4)
    }
}

/// `(layer, [time, channels, freq])` after each table row.
pub type ShapeTrace = Vec<(String, [usize; 3])>;

fn conv_specs(prefix: &str, cin: usize, cout: usize, k: usize, no_bn: bool) -> Vec<ParamSpec> {
    let mut v = vec![ParamSpec::new(
        format!("{prefix}.w"),
        &[cout, cin, k, k],
        Init::HeUniform { fan_in: cin * k * k },
    )];
    if no_bn {
        v.push(ParamSpec::new(format!("{prefix}.b"), &[cout], Init::Constant(0.0)));
    } else {
        v.extend(batch_norm_specs(&format!("{prefix}.bn"), cout));
    }
    v
}

pub fn resnet14_specs(prefix: &str, config: &ResNetConfig) -> Vec<ParamSpec> {
    let no_bn = config.no_bn;
    let mut specs = conv_specs(&format!("{prefix}.stem"), 1, config.channels[0], STEM_KERNEL, no_bn);
    let mut cin = config.channels[0];
    for (s, (&cout, &blocks)) in config.channels.iter().zip(&config.blocks).enumerate() {
        for b in 0..blocks {
            let block = format!("{prefix}.s{}.b{b}", s + 1);
            let first_in = if b == 0 { cin } else { cout };
            specs.extend(conv_specs(&format!("{block}.conv1"), first_in, cout, 3, no_bn));
            specs.extend(conv_specs(&format!("{block}.conv2"), cout, cout, 3, no_bn));
            if b == 0 {
                specs.extend(conv_specs(&format!("{block}.proj"), cin, cout, 1, no_bn));
            }
        }
        cin = cout;
    }
    specs
}

#[allow(clippy::too_many_arguments)]
fn conv_norm(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    x: &Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
    config: &ResNetConfig,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    let w = params.get(&format!("{prefix}.w"))?;
    if config.no_bn {
        let b = params.get(&format!("{prefix}.b"))?;
        tape.apply(Primitive::Conv2d { stride, pad }, &[x, w, b])
    } else {
        let y = tape.apply(Primitive::Conv2d { stride, pad }, &[x, w])?;
        batch_norm(tape, params, &format!("{prefix}.bn"), &y, config.bn_eps, ctx)
    }
}

fn trace_entry(name: &str, t: &Tensor) -> (String, [usize; 3]) {
    let s = t.shape();
    (name.to_string(), [s[2], s[1], s[3]])
}

/// Runs the trunk on `features[T×input_dim]` and returns `⌈T/4⌉ × c4` frame
/// vectors plus the shape after every table row.
pub fn resnet14_forward(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    features: &Tensor,
    config: &ResNetConfig,
    ctx: &mut ForwardCtx,
) -> Result<(Tensor, ShapeTrace)> {
    if features.rank() != 2 || features.shape()[1] != config.input_dim {
        return Err(Error::shape(format!(
            "trunk expects T×{}, got {:?}",
            config.input_dim,
            features.shape()
        )));
    }
    let frames = features.shape()[0];
    if frames < MIN_FRAMES {
        return Err(Error::InputTooShort {
            frames,
            min: MIN_FRAMES,
        });
    }
    let mut trace = ShapeTrace::new();
    let x = tape.reshape(features, &[1, 1, frames, config.input_dim])?;
    let x = conv_norm(
        tape,
        params,
        &format!("{prefix}.stem"),
        &x,
        (STEM_STRIDE, STEM_STRIDE),
        (STEM_PAD, STEM_PAD),
        config,
        ctx,
    )?;
    let x = tape.relu(&x)?;
    trace.push(trace_entry("conv1", &x));
    let mut x = tape.apply(
        Primitive::MaxPool2d {
            kernel: (POOL_KERNEL, POOL_KERNEL),
            stride: (POOL_STRIDE, POOL_STRIDE),
            pad: (POOL_PAD, POOL_PAD),
        },
        &[&x],
    )?;
    trace.push(trace_entry("maxpool", &x));

    for (s, &blocks) in config.blocks.iter().enumerate() {
        for b in 0..blocks {
            let block = format!("{prefix}.s{}.b{b}", s + 1);
            let stride = if b == 0 { (1, 2) } else { (1, 1) };
            let h = conv_norm(tape, params, &format!("{block}.conv1"), &x, stride, (1, 1), config, ctx)?;
            let h = tape.relu(&h)?;
            let h = conv_norm(tape, params, &format!("{block}.conv2"), &h, (1, 1), (1, 1), config, ctx)?;
            let skip = if b == 0 {
                conv_norm(tape, params, &format!("{block}.proj"), &x, stride, (0, 0), config, ctx)?
            } else {
                x.clone()
            };
            let sum = tape.add(&h, &skip)?;
            x = tape.relu(&sum)?;
        }
        trace.push(trace_entry(&format!("res_conv{}", s + 1), &x));
    }

    let s = x.shape().to_vec();
    let (c, t, f) = (s[1], s[2], s[3]);
    if f != 1 {
        return Err(Error::shape(format!(
            "trunk ends with frequency size {f}; input width {} does not reduce to 1",
            config.input_dim
        )));
    }
    let flat = tape.reshape(&x, &[c, t])?;
    let out = tape.transpose(&flat)?;
    Ok((out, trace))
}
