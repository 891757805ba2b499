use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adam_step, AdamState, TrainConfig};
use crate::autodiff::{Tape, Tensor};
use crate::nn::{apply_bn_updates, BnUpdate, ForwardCtx, ParamStore};
use crate::{Error, Real, Result};

/// Distance from the best validation error rate (absolute) within which an
/// epoch counts as converged. Without a validation split the training loss is
/// used instead, with this as a relative tolerance.
pub const CONVERGENCE_TOLERANCE: Real = 0.01;

/// What a stage optimizes, item by item.
pub trait Objective: Sync {
    /// Scalar training loss of item `index`, recorded on `tape`.
    fn train_loss(&self, tape: &mut Tape, params: &ParamStore, index: usize, ctx: &mut ForwardCtx) -> Result<Tensor>;

    /// Eval-mode `(loss, error rate)` of item `index`.
    fn validate(&self, params: &ParamStore, index: usize) -> Result<(Real, Real)>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Real,
    pub val_loss: Option<Real>,
    pub val_error: Option<Real>,
    /// Validation loss, or training loss when nothing is held out. Early
    /// stopping ranks epochs by `val_error` first and this second.
    pub metric: Real,
}

#[derive(Clone, Debug)]
pub struct LoopOutcome {
    /// Parameters from the best epoch.
    pub params: ParamStore,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: Real,
    pub epochs_to_converge: usize,
}

struct ItemResult {
    loss: Real,
    grads: BTreeMap<String, Vec<Real>>,
    bn: Vec<BnUpdate>,
}

/// Mini-batch Adam with early stopping.
///
/// Every item runs on its own tape (in parallel); gradients are summed in
/// item order and divided by the batch size, so results do not depend on the
/// thread count. Batch-norm statistics from the batch are averaged and
/// folded into the running buffers once per step.
pub fn train_loop<O: Objective>(
    cfg: &TrainConfig,
    mut params: ParamStore,
    train_idx: &[usize],
    val_idx: &[usize],
    objective: &O,
    bn_momentum: Real,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<LoopOutcome> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::DataFault(format!("{} stage has no trainable utterances", cfg.stage)));
    }
    let mut state = AdamState::new();
    let mut history = Vec::new();
    let mut best: Option<(EpochRecord, ParamStore)> = None;
    let mut order = train_idx.to_vec();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.step_seed(epoch, usize::MAX)));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<ItemResult>> = batch
                .par_iter()
                .map(|&i| {
                    let mut tape = Tape::new();
                    let mut ctx = ForwardCtx::train(cfg.step_seed(epoch, i));
                    let loss = objective.train_loss(&mut tape, &params, i, &mut ctx)?;
                    let value = loss.item()?;
                    if !value.is_finite() {
                        return Err(Error::NumericalFault(format!("{} loss is {value} on item {i}", cfg.stage)));
                    }
                    let grads = tape.backward(&loss)?;
                    Ok(ItemResult {
                        loss: value,
                        grads: params.named_grads(&grads),
                        bn: ctx.bn_updates,
                    })
                })
                .collect();
            let mut sum: BTreeMap<String, Vec<Real>> = BTreeMap::new();
            let mut bn = Vec::new();
            for r in results {
                let r = r?;
                loss_sum += r.loss;
                for (name, g) in r.grads {
                    match sum.get_mut(&name) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            sum.insert(name, g);
                        }
                    }
                }
                bn.push(r.bn);
            }
            let scale = 1.0 / batch.len() as Real;
            sum.values_mut().flatten().for_each(|g| *g *= scale);
            adam_step(&mut params, &sum, &mut state, cfg.learning_rate, cfg.weight_decay)?;
            apply_bn_updates(&mut params, &average_bn(&bn), bn_momentum)?;
        }
        let train_loss = loss_sum / order.len() as Real;

        let (val_loss, val_error) = if val_idx.is_empty() {
            (None, None)
        } else {
            let scores = val_idx
                .par_iter()
                .map(|&i| objective.validate(&params, i))
                .collect::<Result<Vec<_>>>()?;
            let n = scores.len() as Real;
            let (l, e) = scores.iter().fold((0.0, 0.0), |(l, e), s| (l + s.0, e + s.1));
            (Some(l / n), Some(e / n))
        };
        let metric = val_loss.unwrap_or(train_loss);
        if !metric.is_finite() {
            return Err(Error::NumericalFault(format!("{} validation metric is {metric}", cfg.stage)));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_error,
            metric,
        };
        on_epoch(&record);
        history.push(record);

        let last = history.last().expect("just pushed");
        match &best {
            Some((b, _)) if !improves(last, b, cfg.min_delta) => {
                if epoch - b.epoch >= cfg.patience {
                    break;
                }
            }
            _ => best = Some((last.clone(), params.clone())),
        }
    }

    let (best_record, params) = best.expect("max_epochs ≥ 1");
    let (best_metric, best_epoch) = (best_record.metric, best_record.epoch);
    let epochs_to_converge = epochs_to_converge(&history[..best_epoch]);
    Ok(LoopOutcome {
        params,
        history,
        best_epoch,
        best_metric,
        epochs_to_converge,
    })
}

/// Whether epoch `r` beats `best` by more than the relative `min_delta`.
///
/// With a validation split, epochs are ranked by error rate first and loss
/// second: a lower error counts even if the loss rose (a CTC model that
/// starts emitting labels often does both at once), and at equal error a
/// lower loss counts (on the blank-only plateau the error stays at 100%).
fn improves(r: &EpochRecord, best: &EpochRecord, min_delta: Real) -> bool {
    let better = |new: Real, old: Real| old - new > min_delta * old.abs();
    match (r.val_error, best.val_error) {
        (Some(e), Some(b)) if better(e, b) => true,
        (Some(e), Some(b)) if e - b > min_delta * b.abs() => false,
        _ => better(r.metric, best.metric),
    }
}

/// First epoch whose validation error is within [`CONVERGENCE_TOLERANCE`] of
/// the best one in `history`.
pub fn epochs_to_converge(history: &[EpochRecord]) -> usize {
    let errors: Option<Vec<Real>> = history.iter().map(|r| r.val_error).collect();
    let (values, tolerance) = match errors {
        Some(e) if !e.is_empty() => (e, CONVERGENCE_TOLERANCE),
        _ => {
            let m: Vec<Real> = history.iter().map(|r| r.metric).collect();
            let best = m.iter().copied().fold(Real::INFINITY, Real::min);
            (m, CONVERGENCE_TOLERANCE * best.abs())
        }
    };
    let best = values.iter().copied().fold(Real::INFINITY, Real::min);
    values
        .iter()
        .position(|&v| v <= best + tolerance)
        .map_or(history.len(), |i| i + 1)
}

/// Mean of each layer's batch statistics over the items of a batch.
fn average_bn(per_item: &[Vec<BnUpdate>]) -> Vec<BnUpdate> {
    let mut out: Vec<(BnUpdate, usize)> = Vec::new();
    for u in per_item.iter().flatten() {
        match out.iter_mut().find(|(acc, _)| acc.prefix == u.prefix) {
            Some((acc, n)) => {
                acc.mean.iter_mut().zip(&u.mean).for_each(|(a, b)| *a += b);
                acc.var.iter_mut().zip(&u.var).for_each(|(a, b)| *a += b);
                *n += 1;
            }
            None => out.push((u.clone(), 1)),
        }
    }
    out.into_iter()
        .map(|(mut u, n)| {
            let k = n as Real;
            u.mean.iter_mut().chain(u.var.iter_mut()).for_each(|v| *v /= k);
            u
        })
        .collect()
}
