//! Bidirectional LSTM / GRU stacks.
//!
//! Each direction projects the whole input once (`X·W_ih + b`) and then
//! walks the frames, adding `h·W_hh` per step. Gate layout is `[i, f, g, o]`
//! for LSTM and `[r, z, n]` for GRU.

use serde::{Deserialize, Serialize};

use super::{dropout, ForwardCtx, Init, ParamSpec, ParamStore};
use crate::autodiff::{Tape, Tensor};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RnnKind {
    Lstm,
    Gru,
}

impl RnnKind {
    fn gates(self) -> usize {
        match self {
            RnnKind::Lstm => 4,
            RnnKind::Gru => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnnConfig {
    pub kind: RnnKind,
    pub layers: usize,
    /// Units per direction.
    pub hidden: usize,
}

impl RnnConfig {
    pub fn blstm(layers: usize, hidden: usize) -> Self {
        RnnConfig {
            kind: RnnKind::Lstm,
            layers,
            hidden,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }
}

const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

pub fn rnn_specs(prefix: &str, input_dim: usize, config: &RnnConfig) -> Vec<ParamSpec> {
    let h = config.hidden;
    let width = config.kind.gates() * h;
    let recurrent = Init::Uniform {
        bound: 1.0 / (h as Real).sqrt(),
    };
    let mut specs = Vec::new();
    for layer in 0..config.layers {
        let d = if layer == 0 { input_dim } else { 2 * h };
        for dir in DIRECTIONS {
            let p = format!("{prefix}.l{layer}.{dir}");
            specs.push(ParamSpec::new(format!("{p}.w_ih"), &[d, width], recurrent.clone()));
            specs.push(ParamSpec::new(format!("{p}.w_hh"), &[h, width], recurrent.clone()));
            match config.kind {
                RnnKind::Lstm => {
                    specs.push(ParamSpec::new(format!("{p}.b"), &[width], Init::ForgetBias { hidden: h }));
                }
                RnnKind::Gru => {
                    specs.push(ParamSpec::new(format!("{p}.b_ih"), &[width], Init::Constant(0.0)));
                    specs.push(ParamSpec::new(format!("{p}.b_hh"), &[width], Init::Constant(0.0)));
                }
            }
        }
    }
    specs
}

/// Runs the stack over `x[T×d]` and returns `T × 2·hidden`, forward and
/// backward outputs concatenated per frame. Dropout at `dropout_rate` is
/// applied to the input of every layer after the first, in training only.
pub fn rnn_forward(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    x: &Tensor,
    config: &RnnConfig,
    dropout_rate: Real,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    if x.rank() != 2 || x.shape()[0] == 0 {
        return Err(Error::shape(format!("rnn input must be non-empty T×d, got {:?}", x.shape())));
    }
    let mut h = x.clone();
    for layer in 0..config.layers {
        if layer > 0 {
            h = dropout(tape, &h, dropout_rate, ctx)?;
        }
        let mut outs = Vec::with_capacity(2);
        for dir in DIRECTIONS {
            let p = format!("{prefix}.l{layer}.{dir}");
            let w_ih = params.get(&format!("{p}.w_ih"))?;
            if h.shape()[1] != w_ih.shape()[0] {
                return Err(Error::shape(format!(
                    "`{p}` expects width {}, got {}",
                    w_ih.shape()[0],
                    h.shape()[1]
                )));
            }
            let reverse = dir == "bwd";
            outs.push(match config.kind {
                RnnKind::Lstm => lstm_direction(tape, params, &p, &h, config.hidden, reverse)?,
                RnnKind::Gru => gru_direction(tape, params, &p, &h, config.hidden, reverse)?,
            });
        }
        h = tape.concat(&[&outs[0], &outs[1]], 1)?;
    }
    Ok(h)
}

fn frame_order(frames: usize, reverse: bool) -> Vec<usize> {
    if reverse {
        (0..frames).rev().collect()
    } else {
        (0..frames).collect()
    }
}

/// Stacks per-step `1×H` outputs (produced in `order`) back into time order.
fn stack_in_time(tape: &mut Tape, steps: Vec<Tensor>, reverse: bool) -> Result<Tensor> {
    let mut steps = steps;
    if reverse {
        steps.reverse();
    }
    let refs: Vec<&Tensor> = steps.iter().collect();
    tape.concat(&refs, 0)
}

fn lstm_direction(
    tape: &mut Tape,
    params: &ParamStore,
    p: &str,
    x: &Tensor,
    hidden: usize,
    reverse: bool,
) -> Result<Tensor> {
    let w_ih = params.get(&format!("{p}.w_ih"))?;
    let w_hh = params.get(&format!("{p}.w_hh"))?;
    let b = params.get(&format!("{p}.b"))?;
    let xw = tape.matmul(x, w_ih)?;
    let proj = tape.add_bias(&xw, b)?;
    let hsz = hidden;

    let mut state: Option<(Tensor, Tensor)> = None;
    let mut steps = Vec::with_capacity(x.shape()[0]);
    for t in frame_order(x.shape()[0], reverse) {
        let mut pre = tape.row(&proj, t)?;
        if let Some((h, _)) = &state {
            let rec = tape.matmul(h, w_hh)?;
            pre = tape.add(&pre, &rec)?;
        }
        let i_pre = tape.slice_cols(&pre, 0..hsz)?;
        let f_pre = tape.slice_cols(&pre, hsz..2 * hsz)?;
        let g = tape.slice_cols(&pre, 2 * hsz..3 * hsz)?;
        let o = tape.slice_cols(&pre, 3 * hsz..4 * hsz)?;
        let i = tape.sigmoid(&i_pre)?;
        let g = tape.tanh(&g)?;
        let o = tape.sigmoid(&o)?;
        let ig = tape.mul(&i, &g)?;
        let c = match &state {
            Some((_, c_prev)) => {
                let f = tape.sigmoid(&f_pre)?;
                let fc = tape.mul(&f, c_prev)?;
                tape.add(&fc, &ig)?
            }
            None => ig,
        };
        let tc = tape.tanh(&c)?;
        let h = tape.mul(&o, &tc)?;
        steps.push(h.clone());
        state = Some((h, c));
    }
    stack_in_time(tape, steps, reverse)
}

fn gru_direction(
    tape: &mut Tape,
    params: &ParamStore,
    p: &str,
    x: &Tensor,
    hidden: usize,
    reverse: bool,
) -> Result<Tensor> {
    let w_ih = params.get(&format!("{p}.w_ih"))?;
    let w_hh = params.get(&format!("{p}.w_hh"))?;
    let b_ih = params.get(&format!("{p}.b_ih"))?;
    let b_hh = params.get(&format!("{p}.b_hh"))?;
    let xw = tape.matmul(x, w_ih)?;
    let proj = tape.add_bias(&xw, b_ih)?;
    let hsz = hidden;
    let b_hh_row = tape.reshape(b_hh, &[1, 3 * hsz])?;

    let mut h_prev = Tensor::zeros(&[1, hsz]);
    let mut steps = Vec::with_capacity(x.shape()[0]);
    for t in frame_order(x.shape()[0], reverse) {
        let xt = tape.row(&proj, t)?;
        let hw = tape.matmul(&h_prev, w_hh)?;
        let hw = tape.add(&hw, &b_hh_row)?;
        let x_r = tape.slice_cols(&xt, 0..hsz)?;
        let x_z = tape.slice_cols(&xt, hsz..2 * hsz)?;
        let x_n = tape.slice_cols(&xt, 2 * hsz..3 * hsz)?;
        let h_r = tape.slice_cols(&hw, 0..hsz)?;
        let h_z = tape.slice_cols(&hw, hsz..2 * hsz)?;
        let h_n = tape.slice_cols(&hw, 2 * hsz..3 * hsz)?;
        let r_pre = tape.add(&x_r, &h_r)?;
        let r = tape.sigmoid(&r_pre)?;
        let z_pre = tape.add(&x_z, &h_z)?;
        let z = tape.sigmoid(&z_pre)?;
        let rh = tape.mul(&r, &h_n)?;
        let n_pre = tape.add(&x_n, &rh)?;
        let n = tape.tanh(&n_pre)?;
        // h = (1 − z)·n + z·h_prev = n + z·(h_prev − n)
        let neg_n = tape.affine(&n, -1.0, 0.0)?;
        let diff = tape.add(&h_prev, &neg_n)?;
        let zd = tape.mul(&z, &diff)?;
        let h = tape.add(&n, &zd)?;
        steps.push(h.clone());
        h_prev = h;
    }
    stack_in_time(tape, steps, reverse)
}
