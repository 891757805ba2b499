//! Central-difference verification of analytic gradients.

use super::{Tape, Tensor};
use crate::{Error, Real, Result};

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / 2eps` for a plain scalar function.
pub fn central_difference(f: impl Fn(&[Real]) -> Real, x: &[Real], i: usize, eps: Real) -> Real {
    let mut probe = x.to_vec();
    probe[i] = x[i] + eps;
    let plus = f(&probe);
    probe[i] = x[i] - eps;
    let minus = f(&probe);
    (plus - minus) / (2.0 * eps)
}

/// Max over all coordinates of `|analytic − numeric| / max(1, |analytic|)`.
///
/// `f` builds a scalar on the tape it is given. It is run once with `x`
/// tracking gradients and twice per coordinate on fresh tapes.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: Real) -> Result<Real>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_sampled(f, x, eps, &all)
}

/// Same as [`finite_diff_check`], restricted to the listed coordinates.
pub fn finite_diff_check_sampled<F>(f: F, x: &Tensor, eps: Real, coords: &[usize]) -> Result<Real>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let leaf = x.detach().with_requires_grad(true);
    let mut tape = Tape::new();
    let loss = f(&mut tape, &leaf)?;
    let grads = tape.backward(&loss)?;
    let analytic = grads.get(&leaf);

    let eval = |values: &[Real]| -> Result<Real> {
        let probe = Tensor::constant(x.shape(), values.to_vec())?;
        f(&mut Tape::new(), &probe)?.item()
    };
    let base = x.to_vec();
    let mut worst: Real = 0.0;
    for &i in coords {
        let mut probe = base.clone();
        probe[i] = base[i] + eps;
        let plus = eval(&probe)?;
        probe[i] = base[i] - eps;
        let minus = eval(&probe)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
