use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{edit_distance, Checkpoint, CheckpointMeta, Dataset, LoopOutcome, StageId, TrainConfig, TrainLog};
use super::trainer::{train_loop, Objective};
use crate::autodiff::{Tape, Tensor};
use crate::ctc::{ctc_forced_align, ctc_greedy_decode, required_frames, LogProbLattice};
use crate::models::{
    argmax, cross_entropy, ctc_loss, feature_tensor, one_hot, AcousticModel, BaselineModel, FrameCnn, LidHead,
    ModelConfig,
};
use crate::nn::{ForwardCtx, ParamStore, ResNetConfig, MIN_FRAMES};
use crate::{Error, Real, Result};

/// Per-utterance frame classes at the trunk's output rate.
pub type AlignmentTable = BTreeMap<String, Vec<usize>>;

/// A trained stage: its checkpoint plus bookkeeping.
#[derive(Clone, Debug)]
pub struct StageResult {
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub best_metric: Real,
    pub epochs_to_converge: usize,
    pub epochs_run: usize,
    /// Utterances left out of training (too short or infeasible labels).
    pub skipped: Vec<String>,
}

impl StageResult {
    fn new(
        stage: StageId,
        model: &ModelConfig,
        data: &Dataset,
        outcome: LoopOutcome,
        skipped: Vec<String>,
        upstream_hash: Option<String>,
    ) -> Self {
        let meta = CheckpointMeta {
            stage,
            model: model.clone(),
            frontend: data.frontend.clone(),
            epoch: outcome.best_epoch,
            history: outcome.history.clone(),
            vocab_hash: data.vocab.hash(),
            upstream_hash,
        };
        StageResult {
            checkpoint: Checkpoint {
                meta,
                params: outcome.params,
            },
            best_epoch: outcome.best_epoch,
            best_metric: outcome.best_metric,
            epochs_to_converge: outcome.epochs_to_converge,
            epochs_run: outcome.history.len(),
            skipped,
        }
    }
}

fn check_labels(data: &Dataset, model: &ModelConfig) -> Result<()> {
    if data.vocab.len() != model.vocab_size {
        return Err(Error::Config(format!(
            "model expects {} phonemes, vocabulary has {}",
            model.vocab_size,
            data.vocab.len()
        )));
    }
    for u in &data.utterances {
        if u.labels.iter().any(|&l| l == 0 || l > model.vocab_size) {
            return Err(Error::DataFault(format!("{}: phoneme id outside 1..={}", u.utt_id, model.vocab_size)));
        }
        if u.dialect >= model.n_dialects {
            return Err(Error::DataFault(format!("{}: dialect {} ≥ N = {}", u.utt_id, u.dialect, model.n_dialects)));
        }
    }
    Ok(())
}

/// Splits the dataset into usable training/validation indices, reporting
/// the utterances `usable` rejects.
fn partition(data: &Dataset, cfg: &TrainConfig, usable: impl Fn(usize) -> bool) -> (Vec<usize>, Vec<usize>, Vec<String>) {
    let (train, val) = data.split_indices(cfg.val_fraction);
    let mut skipped = Vec::new();
    let mut keep = |idx: Vec<usize>| -> Vec<usize> {
        idx.into_iter()
            .filter(|&i| {
                let ok = usable(i);
                if !ok {
                    skipped.push(data.utterances[i].utt_id.clone());
                }
                ok
            })
            .collect()
    };
    let train = keep(train);
    let val = keep(val);
    if !skipped.is_empty() {
        log::warn!("{} stage: skipping {} utterance(s): {}", cfg.stage, skipped.len(), skipped.join(", "));
    }
    (train, val, skipped)
}

fn record_into(log: &mut TrainLog, stage: StageId) -> impl FnMut(&super::EpochRecord) + '_ {
    move |r| log.record(stage, r)
}

struct AmObjective<'a> {
    data: &'a Dataset,
    model: &'a ModelConfig,
}

impl Objective for AmObjective<'_> {
    fn train_loss(&self, tape: &mut Tape, params: &ParamStore, i: usize, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let u = &self.data.utterances[i];
        let out = AcousticModel::forward_with(tape, params, self.model, &feature_tensor(&u.features)?, ctx)?;
        ctc_loss(tape, &out.log_probs, &u.labels)
    }

    fn validate(&self, params: &ParamStore, i: usize) -> Result<(Real, Real)> {
        let u = &self.data.utterances[i];
        let mut tape = Tape::new();
        let out = AcousticModel::forward_with(
            &mut tape,
            params,
            self.model,
            &feature_tensor(&u.features)?,
            &mut ForwardCtx::eval(),
        )?;
        let loss = ctc_loss(&mut tape, &out.log_probs, &u.labels)?.item()?;
        let hyp = ctc_greedy_decode(&LogProbLattice::from_tensor(&out.log_probs)?);
        let per = edit_distance(&hyp, &u.labels) as Real / u.labels.len() as Real;
        Ok((loss, per))
    }
}

fn ctc_feasible(data: &Dataset, i: usize) -> bool {
    let u = &data.utterances[i];
    u.features.frames >= MIN_FRAMES
        && !u.labels.is_empty()
        && required_frames(&u.labels) <= ResNetConfig::output_frames(u.features.frames)
}

/// Stage 1 of both multi-stage systems: the whole acoustic model trained
/// with CTC. Validation reports CTC loss and greedy phone error rate.
pub fn train_am_ctc(data: &Dataset, model: &ModelConfig, cfg: &TrainConfig, log: &mut TrainLog) -> Result<StageResult> {
    model.validate()?;
    check_labels(data, model)?;
    let (train, val, skipped) = partition(data, cfg, |i| ctc_feasible(data, i));
    let init = AcousticModel::new(model.clone(), cfg.seed)?;
    let objective = AmObjective { data, model };
    let outcome = train_loop(
        cfg,
        init.params,
        &train,
        &val,
        &objective,
        model.bn_momentum,
        record_into(log, StageId::Am),
    )?;
    Ok(StageResult::new(StageId::Am, model, data, outcome, skipped, None))
}

/// Forced alignment of every feasible utterance with a trained acoustic
/// model. Returns the table and the ids that could not be aligned.
pub fn align_corpus(data: &Dataset, am: &Checkpoint) -> Result<(AlignmentTable, Vec<String>)> {
    am.expect_stage(StageId::Am)?;
    am.expect_vocab(&data.vocab.hash())?;
    let model = AcousticModel {
        config: am.meta.model.clone(),
        params: am.params.clone(),
    };
    let aligned: Vec<Result<Option<Vec<usize>>>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            if !ctc_feasible(data, i) {
                return Ok(None);
            }
            let u = &data.utterances[i];
            let (lattice, _) = model.infer(&u.features)?;
            Ok(Some(ctc_forced_align(&lattice, &u.labels)?.classes))
        })
        .collect();
    let mut table = AlignmentTable::new();
    let mut skipped = Vec::new();
    for (u, a) in data.utterances.iter().zip(aligned) {
        match a? {
            Some(classes) => {
                table.insert(u.utt_id.clone(), classes);
            }
            None => skipped.push(u.utt_id.clone()),
        }
    }
    if !skipped.is_empty() {
        log::warn!("alignment: skipped {} infeasible utterance(s)", skipped.len());
    }
    Ok((table, skipped))
}

struct CnnObjective<'a> {
    data: &'a Dataset,
    model: &'a ModelConfig,
    targets: Vec<Option<Vec<Real>>>,
}

impl CnnObjective<'_> {
    fn loss(&self, tape: &mut Tape, params: &ParamStore, i: usize, ctx: &mut ForwardCtx) -> Result<(Tensor, Tensor)> {
        let u = &self.data.utterances[i];
        let out = FrameCnn::forward_with(tape, params, self.model, &feature_tensor(&u.features)?, ctx)?;
        let target = self.targets[i].as_ref().expect("only aligned items are scheduled");
        Ok((cross_entropy(tape, &out.log_probs, target)?, out.log_probs))
    }
}

impl Objective for CnnObjective<'_> {
    fn train_loss(&self, tape: &mut Tape, params: &ParamStore, i: usize, ctx: &mut ForwardCtx) -> Result<Tensor> {
        Ok(self.loss(tape, params, i, ctx)?.0)
    }

    fn validate(&self, params: &ParamStore, i: usize) -> Result<(Real, Real)> {
        let mut tape = Tape::new();
        let (loss, log_probs) = self.loss(&mut tape, params, i, &mut ForwardCtx::eval())?;
        let k = self.model.classes();
        let target = self.targets[i].as_ref().expect("only aligned items are scheduled");
        let frames = log_probs.shape()[0];
        let wrong = (0..frames)
            .filter(|&t| {
                let row = &log_probs.data()[t * k..(t + 1) * k];
                target[t * k + argmax(row)] != 1.0
            })
            .count();
        Ok((loss.item()?, wrong as Real / frames as Real))
    }
}

/// Stage 2 of the three-stage system: a fresh trunk plus per-frame linear
/// layer trained with frame cross-entropy against the alignment classes
/// (blank included as class 0). Validation error is frame error rate.
pub fn train_frame_ce_cnn(
    data: &Dataset,
    alignments: &AlignmentTable,
    model: &ModelConfig,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<StageResult> {
    model.validate()?;
    check_labels(data, model)?;
    let classes = model.classes();
    let mut targets = Vec::with_capacity(data.len());
    for u in &data.utterances {
        let Some(a) = alignments.get(&u.utt_id) else {
            targets.push(None);
            continue;
        };
        let expected = ResNetConfig::output_frames(u.features.frames);
        if a.len() != expected {
            return Err(Error::DataFault(format!(
                "{}: alignment has {} frames, features give {expected}",
                u.utt_id,
                a.len()
            )));
        }
        if let Some(&bad) = a.iter().find(|&&c| c >= classes) {
            return Err(Error::DataFault(format!("{}: alignment class {bad} ≥ {classes}", u.utt_id)));
        }
        targets.push(Some(one_hot(a, classes)));
    }
    let (train, val, skipped) = partition(data, cfg, |i| targets[i].is_some() && data.utterances[i].features.frames >= MIN_FRAMES);
    let init = FrameCnn::new(model.clone(), cfg.seed)?;
    let objective = CnnObjective { data, model, targets };
    let outcome = train_loop(
        cfg,
        init.params,
        &train,
        &val,
        &objective,
        model.bn_momentum,
        record_into(log, StageId::Cnn),
    )?;
    Ok(StageResult::new(StageId::Cnn, model, data, outcome, skipped, None))
}

/// Utterance-level dialect objective over precomputed inputs; shared by the
/// dialect heads and the baseline.
struct DialectObjective<'a> {
    data: &'a Dataset,
    model: &'a ModelConfig,
    inputs: Vec<Option<Tensor>>,
    dropout: Real,
    baseline: bool,
}

impl DialectObjective<'_> {
    fn log_probs(&self, tape: &mut Tape, params: &ParamStore, i: usize, dropout: Real, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let x = self.inputs[i].as_ref().expect("only usable items are scheduled");
        if self.baseline {
            BaselineModel::forward_with(tape, params, self.model, x, dropout, ctx)
        } else {
            LidHead::forward_with(tape, params, self.model, x, dropout, ctx)
        }
    }
}

impl Objective for DialectObjective<'_> {
    fn train_loss(&self, tape: &mut Tape, params: &ParamStore, i: usize, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let lp = self.log_probs(tape, params, i, self.dropout, ctx)?;
        cross_entropy(tape, &lp, &one_hot(&[self.data.utterances[i].dialect], self.model.n_dialects))
    }

    fn validate(&self, params: &ParamStore, i: usize) -> Result<(Real, Real)> {
        let lp = self.log_probs(&mut Tape::new(), params, i, 0.0, &mut ForwardCtx::eval())?;
        let d = self.data.utterances[i].dialect;
        Ok((-lp.data()[d], Real::from(u8::from(argmax(lp.data()) != d))))
    }
}

fn ensure_upstream(data: &Dataset, upstream: &Checkpoint, stage: StageId, model: &ModelConfig) -> Result<()> {
    upstream.expect_stage(stage)?;
    upstream.expect_vocab(&data.vocab.hash())?;
    let up = &upstream.meta.model;
    if up.trunk != model.trunk || up.vocab_size != model.vocab_size {
        return Err(Error::IncompatibleCheckpoint(
            "head configuration does not match the upstream network".into(),
        ));
    }
    if upstream.meta.frontend != data.frontend {
        return Err(Error::IncompatibleCheckpoint(
            "features were computed with a different front-end configuration".into(),
        ));
    }
    Ok(())
}

/// Trains a dialect head on frozen trunk features from `upstream`. The
/// upstream parameters are only read: features are computed once, in eval
/// mode, before training starts.
fn train_head_on(
    data: &Dataset,
    upstream: &Checkpoint,
    stage: StageId,
    model: &ModelConfig,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<StageResult> {
    model.validate()?;
    check_labels(data, model)?;
    ensure_upstream(data, upstream, stage, model)?;
    let before = upstream.params.content_hash();
    let config = upstream.meta.model.clone();
    let inputs = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let u = &data.utterances[i];
            if u.features.frames < MIN_FRAMES {
                return Ok(None);
            }
            let x = feature_tensor(&u.features)?;
            let out = match stage {
                StageId::Am => AcousticModel::forward_with(&mut Tape::new(), &upstream.params, &config, &x, &mut ForwardCtx::eval())?,
                _ => FrameCnn::forward_with(&mut Tape::new(), &upstream.params, &config, &x, &mut ForwardCtx::eval())?,
            };
            Ok(Some(out.intermediate.detach().with_requires_grad(false)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (train, val, skipped) = partition(data, cfg, |i| inputs[i].is_some());
    let init = LidHead::new(model.clone(), cfg.seed)?;
    let objective = DialectObjective {
        data,
        model,
        inputs,
        dropout: cfg.dropout,
        baseline: false,
    };
    let outcome = train_loop(
        cfg,
        init.params,
        &train,
        &val,
        &objective,
        model.bn_momentum,
        record_into(log, StageId::Lid),
    )?;
    let after = upstream.params.content_hash();
    if before != after {
        return Err(Error::IncompatibleCheckpoint("upstream network changed during head training".into()));
    }
    Ok(StageResult::new(StageId::Lid, model, data, outcome, skipped, Some(after)))
}

/// Stage 2 of the two-stage system: the dialect head on the acoustic
/// model's intermediate features. `model` supplies the head configuration;
/// its trunk and vocabulary must match the checkpoint.
pub fn train_lid_on_intermediate(
    data: &Dataset,
    am: &Checkpoint,
    model: &ModelConfig,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<StageResult> {
    train_head_on(data, am, StageId::Am, model, cfg, log)
}

/// Stage 3 of the three-stage system: the dialect head on the frame CNN's
/// trunk features.
pub fn train_lid_on_cnn(
    data: &Dataset,
    cnn: &Checkpoint,
    model: &ModelConfig,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<StageResult> {
    train_head_on(data, cnn, StageId::Cnn, model, cfg, log)
}

/// One-stage baseline: BLSTM dialect classifier on the log-mel features.
pub fn train_baseline(data: &Dataset, model: &ModelConfig, cfg: &TrainConfig, log: &mut TrainLog) -> Result<StageResult> {
    model.validate()?;
    check_labels(data, model)?;
    let inputs = data
        .utterances
        .iter()
        .map(|u| feature_tensor(&u.features).map(Some))
        .collect::<Result<Vec<_>>>()?;
    let (train, val, skipped) = partition(data, cfg, |i| data.utterances[i].features.frames > 0);
    let init = BaselineModel::new(model.clone(), cfg.seed)?;
    let objective = DialectObjective {
        data,
        model,
        inputs,
        dropout: cfg.dropout,
        baseline: true,
    };
    let outcome = train_loop(
        cfg,
        init.params,
        &train,
        &val,
        &objective,
        model.bn_momentum,
        record_into(log, StageId::Baseline),
    )?;
    Ok(StageResult::new(StageId::Baseline, model, data, outcome, skipped, None))
}
