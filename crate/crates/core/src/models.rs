//! The networks: a CTC acoustic model (ResNet14 → BLSTM → linear), a
//! recurrent dialect head that reads the acoustic model's trunk output, a
//! one-stage BLSTM baseline on raw features, and the frame-level CNN used by
//! the three-stage system.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Primitive, Tape, Tensor};
use crate::ctc::LogProbLattice;
use crate::frontend::FeatureMatrix;
use crate::nn::{
    dropout, init_params, linear, linear_specs, resnet14_forward, resnet14_specs, rnn_forward, rnn_specs,
    time_avg_pool, ForwardCtx, ParamSpec, ParamStore, ResNetConfig, RnnConfig, RnnKind, ShapeTrace,
};
use crate::{Error, Real, Result};

pub const TRUNK: &str = "trunk";
pub const AM_RNN: &str = "am.rnn";
pub const AM_OUT: &str = "am.out";
pub const LID_RNN: &str = "lid.rnn";
pub const LID_OUT: &str = "lid.out";
pub const BASE_RNN: &str = "base.rnn";
pub const BASE_OUT: &str = "base.out";
pub const CNN_OUT: &str = "cnn.out";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    Micro,
}

/// Where the dialect head averages over time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    /// Average per-frame logits, then normalize.
    Logits,
    /// Average RNN outputs, then project.
    Hidden,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scale: Scale,
    /// Phoneme inventory size V (output layer has V+1 classes with blank 0).
    pub vocab_size: usize,
    /// Dialect count N.
    pub n_dialects: usize,
    pub trunk: ResNetConfig,
    pub am_rnn: RnnConfig,
    pub lid_rnn: RnnConfig,
    pub baseline_rnn: RnnConfig,
    pub pool: Pool,
    pub bn_momentum: Real,
}

impl ModelConfig {
    pub fn full(vocab_size: usize, n_dialects: usize) -> Self {
        ModelConfig {
            scale: Scale::Full,
            vocab_size,
            n_dialects,
            trunk: ResNetConfig::full(),
            am_rnn: RnnConfig::blstm(2, 256),
            lid_rnn: RnnConfig::blstm(2, 256),
            baseline_rnn: RnnConfig::blstm(2, 256),
            pool: Pool::Logits,
            bn_momentum: 0.1,
        }
    }

    pub fn micro(vocab_size: usize, n_dialects: usize) -> Self {
        ModelConfig {
            scale: Scale::Micro,
            trunk: ResNetConfig::micro(),
            am_rnn: RnnConfig::blstm(2, 32),
            lid_rnn: RnnConfig::blstm(2, 32),
            baseline_rnn: RnnConfig::blstm(2, 32),
            ..Self::full(vocab_size, n_dialects)
        }
    }

    pub fn for_scale(scale: Scale, vocab_size: usize, n_dialects: usize) -> Self {
        match scale {
            Scale::Full => Self::full(vocab_size, n_dialects),
            Scale::Micro => Self::micro(vocab_size, n_dialects),
        }
    }

    pub fn classes(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.n_dialects < 2 {
            return Err(Error::Config("need V ≥ 1 phonemes and N ≥ 2 dialects".into()));
        }
        for (name, rnn) in [("am_rnn", &self.am_rnn), ("lid_rnn", &self.lid_rnn), ("baseline_rnn", &self.baseline_rnn)] {
            if rnn.layers == 0 || rnn.hidden == 0 {
                return Err(Error::Config(format!("{name} needs ≥ 1 layer and ≥ 1 unit")));
            }
        }
        if self.am_rnn.kind != RnnKind::Lstm || self.baseline_rnn.kind != RnnKind::Lstm {
            return Err(Error::Config("GRU is only offered for the dialect head".into()));
        }
        Ok(())
    }
}

/// Frame features as a `T × n_mels` constant tensor.
pub fn feature_tensor(features: &FeatureMatrix) -> Result<Tensor> {
    Tensor::constant(&[features.frames, features.n_mels], features.data.clone())
}

/// Soft-target cross-entropy `−Σ target·log_probs`, averaged over rows when
/// `log_probs` is `T×K`. With a one-hot target this is the usual negative
/// log-likelihood.
pub fn cross_entropy(tape: &mut Tape, log_probs: &Tensor, target: &[Real]) -> Result<Tensor> {
    if target.len() != log_probs.numel() {
        return Err(Error::shape(format!(
            "target has {} entries for log-probs {:?}",
            target.len(),
            log_probs.shape()
        )));
    }
    let rows = if log_probs.rank() == 2 { log_probs.shape()[0] } else { 1 };
    let t = Tensor::constant(log_probs.shape(), target.to_vec())?;
    let weighted = tape.mul(log_probs, &t)?;
    let total = tape.sum(&weighted, None)?;
    tape.affine(&total, -1.0 / rows as Real, 0.0)
}

/// One-hot rows for `labels` over `classes`.
pub fn one_hot(labels: &[usize], classes: usize) -> Vec<Real> {
    let mut v = vec![0.0; labels.len() * classes];
    for (r, &k) in labels.iter().enumerate() {
        v[r * classes + k] = 1.0;
    }
    v
}

pub fn ctc_loss(tape: &mut Tape, log_probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    tape.apply(
        Primitive::CtcLoss {
            labels: labels.to_vec(),
        },
        &[log_probs],
    )
}

/// Output of a trunk-based network on one utterance.
#[derive(Debug)]
pub struct FrameOutput {
    /// `T′ × (V+1)` log-probabilities.
    pub log_probs: Tensor,
    /// `T′ × c4` trunk features (before any recurrent layer).
    pub intermediate: Tensor,
    pub trace: ShapeTrace,
}

#[derive(Clone, Debug)]
pub struct AcousticModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl AcousticModel {
    pub fn specs(config: &ModelConfig) -> Vec<ParamSpec> {
        let mut specs = resnet14_specs(TRUNK, &config.trunk);
        specs.extend(rnn_specs(AM_RNN, config.trunk.output_dim(), &config.am_rnn));
        specs.extend(linear_specs(AM_OUT, config.am_rnn.output_dim(), config.classes()));
        specs
    }

    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&Self::specs(&config), seed)?;
        Ok(AcousticModel { config, params })
    }

    pub fn forward_with(
        tape: &mut Tape,
        params: &ParamStore,
        config: &ModelConfig,
        features: &Tensor,
        ctx: &mut ForwardCtx,
    ) -> Result<FrameOutput> {
        let (intermediate, trace) = resnet14_forward(tape, params, TRUNK, features, &config.trunk, ctx)?;
        let h = rnn_forward(tape, params, AM_RNN, &intermediate, &config.am_rnn, 0.0, ctx)?;
        let logits = linear(tape, params, AM_OUT, &h)?;
        let log_probs = tape.log_softmax(&logits, 1)?;
        Ok(FrameOutput {
            log_probs,
            intermediate,
            trace,
        })
    }

    pub fn forward(&self, tape: &mut Tape, features: &Tensor, ctx: &mut ForwardCtx) -> Result<FrameOutput> {
        Self::forward_with(tape, &self.params, &self.config, features, ctx)
    }

    /// Eval-mode lattice and intermediate features for one utterance.
    pub fn infer(&self, features: &FeatureMatrix) -> Result<(LogProbLattice, Tensor)> {
        let out = self.forward(&mut Tape::new(), &feature_tensor(features)?, &mut ForwardCtx::eval())?;
        let intermediate = out.intermediate.detach().with_requires_grad(false);
        Ok((LogProbLattice::from_tensor(&out.log_probs)?, intermediate))
    }

    pub fn trunk_param_count(&self) -> usize {
        self.params.param_count_with_prefix(&format!("{TRUNK}."))
    }
}

/// Frame-level CNN of the three-stage system: a fresh trunk plus a linear
/// layer to V+1 classes, trained with frame cross-entropy.
#[derive(Clone, Debug)]
pub struct FrameCnn {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl FrameCnn {
    pub fn specs(config: &ModelConfig) -> Vec<ParamSpec> {
        let mut specs = resnet14_specs(TRUNK, &config.trunk);
        specs.extend(linear_specs(CNN_OUT, config.trunk.output_dim(), config.classes()));
        specs
    }

    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&Self::specs(&config), seed)?;
        Ok(FrameCnn { config, params })
    }

    pub fn forward_with(
        tape: &mut Tape,
        params: &ParamStore,
        config: &ModelConfig,
        features: &Tensor,
        ctx: &mut ForwardCtx,
    ) -> Result<FrameOutput> {
        let (intermediate, trace) = resnet14_forward(tape, params, TRUNK, features, &config.trunk, ctx)?;
        let logits = linear(tape, params, CNN_OUT, &intermediate)?;
        let log_probs = tape.log_softmax(&logits, 1)?;
        Ok(FrameOutput {
            log_probs,
            intermediate,
            trace,
        })
    }

    pub fn forward(&self, tape: &mut Tape, features: &Tensor, ctx: &mut ForwardCtx) -> Result<FrameOutput> {
        Self::forward_with(tape, &self.params, &self.config, features, ctx)
    }

    pub fn infer(&self, features: &FeatureMatrix) -> Result<(LogProbLattice, Tensor)> {
        let out = self.forward(&mut Tape::new(), &feature_tensor(features)?, &mut ForwardCtx::eval())?;
        let intermediate = out.intermediate.detach().with_requires_grad(false);
        Ok((LogProbLattice::from_tensor(&out.log_probs)?, intermediate))
    }
}

/// Shared utterance classifier: RNN over frames, then pooling and a linear
/// layer to `classes`, then log-softmax.
fn classify(
    tape: &mut Tape,
    params: &ParamStore,
    (rnn_prefix, out_prefix): (&str, &str),
    rnn: &RnnConfig,
    pool: Pool,
    rate: Real,
    x: &Tensor,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    let h = rnn_forward(tape, params, rnn_prefix, x, rnn, rate, ctx)?;
    let h = dropout(tape, &h, rate, ctx)?;
    let pooled = match pool {
        Pool::Logits => {
            let logits = linear(tape, params, out_prefix, &h)?;
            time_avg_pool(tape, &logits)?
        }
        Pool::Hidden => {
            let mean = time_avg_pool(tape, &h)?;
            let row = tape.reshape(&mean, &[1, rnn.output_dim()])?;
            let logits = linear(tape, params, out_prefix, &row)?;
            let n = logits.numel();
            tape.reshape(&logits, &[n])?
        }
    };
    tape.log_softmax(&pooled, 0)
}

/// Recurrent dialect classifier over intermediate trunk features.
#[derive(Clone, Debug)]
pub struct LidHead {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl LidHead {
    pub fn specs(config: &ModelConfig) -> Vec<ParamSpec> {
        let mut specs = rnn_specs(LID_RNN, config.trunk.output_dim(), &config.lid_rnn);
        specs.extend(linear_specs(LID_OUT, config.lid_rnn.output_dim(), config.n_dialects));
        specs
    }

    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&Self::specs(&config), seed)?;
        Ok(LidHead { config, params })
    }

    /// Dialect log-probabilities `[N]` from `T′ × c4` features. `dropout`
    /// only acts when `ctx` is in training mode.
    pub fn forward_with(
        tape: &mut Tape,
        params: &ParamStore,
        config: &ModelConfig,
        intermediate: &Tensor,
        dropout: Real,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        classify(
            tape,
            params,
            (LID_RNN, LID_OUT),
            &config.lid_rnn,
            config.pool,
            dropout,
            intermediate,
            ctx,
        )
    }

    pub fn infer(&self, intermediate: &Tensor) -> Result<Vec<Real>> {
        let x = intermediate.detach().with_requires_grad(false);
        let out = Self::forward_with(&mut Tape::new(), &self.params, &self.config, &x, 0.0, &mut ForwardCtx::eval())?;
        Ok(out.to_vec())
    }
}

/// One-stage baseline: BLSTM straight on log-mel features.
#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl BaselineModel {
    pub fn specs(config: &ModelConfig) -> Vec<ParamSpec> {
        let mut specs = rnn_specs(BASE_RNN, config.trunk.input_dim, &config.baseline_rnn);
        specs.extend(linear_specs(BASE_OUT, config.baseline_rnn.output_dim(), config.n_dialects));
        specs
    }

    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&Self::specs(&config), seed)?;
        Ok(BaselineModel { config, params })
    }

    pub fn forward_with(
        tape: &mut Tape,
        params: &ParamStore,
        config: &ModelConfig,
        features: &Tensor,
        dropout: Real,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        classify(
            tape,
            params,
            (BASE_RNN, BASE_OUT),
            &config.baseline_rnn,
            config.pool,
            dropout,
            features,
            ctx,
        )
    }

    pub fn infer(&self, features: &FeatureMatrix) -> Result<Vec<Real>> {
        let x = feature_tensor(features)?;
        let out = Self::forward_with(&mut Tape::new(), &self.params, &self.config, &x, 0.0, &mut ForwardCtx::eval())?;
        Ok(out.to_vec())
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(values: &[Real]) -> usize {
    (0..values.len()).fold(0, |best, i| if values[i] > values[best] { i } else { best })
}

/// Phoneme inventory; unit on line `i` (0-based) has id `i + 1`, id 0 is the
/// CTC blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    units: Vec<String>,
}

impl Vocab {
    pub fn new(units: Vec<String>) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, u) in units.iter().enumerate() {
            if u.is_empty() || u.chars().any(char::is_whitespace) {
                return Err(Error::ParseFault {
                    line: i + 1,
                    msg: format!("invalid unit {u:?}"),
                });
            }
            if !seen.insert(u.as_str()) {
                return Err(Error::ParseFault {
                    line: i + 1,
                    msg: format!("duplicate unit {u:?}"),
                });
            }
        }
        Ok(Vocab { units })
    }

    /// `ph01 … phNN`, the inventory used by synthetic corpora.
    pub fn synthetic(size: usize) -> Self {
        Vocab {
            units: (1..=size).map(|i| format!("ph{i:02}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn id(&self, unit: &str) -> Option<usize> {
        self.units.iter().position(|u| u == unit).map(|i| i + 1)
    }

    pub fn unit(&self, id: usize) -> Option<&str> {
        id.checked_sub(1).and_then(|i| self.units.get(i)).map(String::as_str)
    }

    /// SHA-256 of the unit list, stored in checkpoints.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for u in &self.units {
            h.update(u.as_bytes());
            h.update(b"\n");
        }
        format!("{:x}", h.finalize())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.units.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
