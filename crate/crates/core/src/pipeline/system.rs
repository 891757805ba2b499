use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    align_corpus, train_am_ctc, train_baseline, train_frame_ce_cnn, train_lid_on_cnn, train_lid_on_intermediate,
    AlignmentTable, Checkpoint, ConvergenceLog, Dataset, StageId, StageResult, TrainConfig, TrainLog,
};
use crate::ctc::write_alignment_table;
use crate::frontend::{FeatureMatrix, FrontendConfig};
use crate::models::{AcousticModel, BaselineModel, FrameCnn, LidHead, ModelConfig, Pool, Scale};
use crate::nn::RnnConfig;
use crate::{Error, Real, Result};

pub const SYSTEM_FILE: &str = "system.json";
pub const AM_CKPT: &str = "am.ckpt";
pub const LID_CKPT: &str = "lid.ckpt";
pub const CNN_CKPT: &str = "cnn.ckpt";
pub const BASELINE_CKPT: &str = "baseline.ckpt";
pub const ALIGN_FILE: &str = "align.tsv";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONVERGENCE_FILE: &str = "convergence.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    Baseline,
    TwoStage,
    ThreeStage,
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SystemKind::Baseline => "baseline",
            SystemKind::TwoStage => "two-stage",
            SystemKind::ThreeStage => "three-stage",
        })
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(SystemKind::Baseline),
            "two-stage" => Ok(SystemKind::TwoStage),
            "three-stage" => Ok(SystemKind::ThreeStage),
            _ => Err(Error::Config(format!("unknown system `{s}`"))),
        }
    }
}

/// Everything needed to train any of the three systems. Read from TOML;
/// every field is optional.
///
/// ```toml
/// scale = "micro"
/// pool = "logits"
///
/// [lid_rnn]
/// kind = "gru"
/// layers = 3
/// hidden = 32
///
/// [am]
/// max_epochs = 40
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub scale: Scale,
    /// Dialect head recurrent layers; defaults to the scale's BLSTM.
    pub lid_rnn: Option<RnnConfig>,
    pub pool: Pool,
    pub frontend: FrontendConfig,
    #[serde(default = "am_default", deserialize_with = "stage_overrides::am")]
    pub am: TrainConfig,
    #[serde(default = "lid_default", deserialize_with = "stage_overrides::lid")]
    pub lid: TrainConfig,
    #[serde(default = "cnn_default", deserialize_with = "stage_overrides::cnn")]
    pub cnn: TrainConfig,
    #[serde(default = "baseline_default", deserialize_with = "stage_overrides::baseline")]
    pub baseline: TrainConfig,
}

fn am_default() -> TrainConfig {
    TrainConfig::for_stage(StageId::Am)
}
fn lid_default() -> TrainConfig {
    TrainConfig::for_stage(StageId::Lid)
}
fn cnn_default() -> TrainConfig {
    TrainConfig::for_stage(StageId::Cnn)
}
fn baseline_default() -> TrainConfig {
    TrainConfig::for_stage(StageId::Baseline)
}

/// Stage tables in the config file may list only the fields they change;
/// the rest come from the stage's defaults.
mod stage_overrides {
    use serde::{Deserialize, Deserializer};

    use super::super::{StageId, TrainConfig};
    use crate::Real;

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Partial {
        learning_rate: Option<Real>,
        weight_decay: Option<Real>,
        batch_size: Option<usize>,
        max_epochs: Option<usize>,
        patience: Option<usize>,
        min_delta: Option<Real>,
        dropout: Option<Real>,
        seed: Option<u64>,
        val_fraction: Option<Real>,
    }

    fn fill<'de, D: Deserializer<'de>>(d: D, stage: StageId) -> Result<TrainConfig, D::Error> {
        let p = Partial::deserialize(d)?;
        let mut c = TrainConfig::for_stage(stage);
        macro_rules! set {
            ($($f:ident),*) => {$( if let Some(v) = p.$f { c.$f = v; } )*};
        }
        set!(learning_rate, weight_decay, batch_size, max_epochs, patience, min_delta, dropout, seed, val_fraction);
        Ok(c)
    }

    pub fn am<'de, D: Deserializer<'de>>(d: D) -> Result<TrainConfig, D::Error> {
        fill(d, StageId::Am)
    }
    pub fn lid<'de, D: Deserializer<'de>>(d: D) -> Result<TrainConfig, D::Error> {
        fill(d, StageId::Lid)
    }
    pub fn cnn<'de, D: Deserializer<'de>>(d: D) -> Result<TrainConfig, D::Error> {
        fill(d, StageId::Cnn)
    }
    pub fn baseline<'de, D: Deserializer<'de>>(d: D) -> Result<TrainConfig, D::Error> {
        fill(d, StageId::Baseline)
    }
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            scale: Scale::Micro,
            lid_rnn: None,
            pool: Pool::Logits,
            frontend: FrontendConfig::default(),
            am: am_default(),
            lid: lid_default(),
            cnn: cnn_default(),
            baseline: baseline_default(),
        }
    }
}

impl SystemConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SystemConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for c in [&self.am, &self.lid, &self.cnn, &self.baseline] {
            c.validate()?;
        }
        Ok(())
    }

    /// Same configuration with every stage seeded from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        for c in [&mut self.am, &mut self.lid, &mut self.cnn, &mut self.baseline] {
            c.seed = seed;
        }
        self
    }

    pub fn model_config(&self, vocab_size: usize, n_dialects: usize) -> ModelConfig {
        let mut m = ModelConfig::for_scale(self.scale, vocab_size, n_dialects);
        if let Some(rnn) = &self.lid_rnn {
            m.lid_rnn = rnn.clone();
        }
        m.pool = self.pool;
        m
    }
}

/// Contents of `system.json` in a trained system directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemManifest {
    pub kind: SystemKind,
    pub model: ModelConfig,
    pub frontend: FrontendConfig,
    pub dialects: usize,
    pub vocab_hash: String,
}

impl SystemManifest {
    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(SYSTEM_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SYSTEM_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn prepare(data: &Dataset, cfg: &SystemConfig, kind: SystemKind, out: &Path) -> Result<(ModelConfig, TrainLog)> {
    cfg.validate()?;
    if data.frontend != cfg.frontend {
        return Err(Error::Config("dataset was featurized with a different front-end configuration".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let model = cfg.model_config(data.vocab.len(), data.n_dialects);
    model.validate()?;
    SystemManifest {
        kind,
        model: model.clone(),
        frontend: data.frontend.clone(),
        dialects: data.n_dialects,
        vocab_hash: data.vocab.hash(),
    }
    .write(out)?;
    let log = TrainLog::append_to(&out.join(LOG_FILE))?;
    Ok((model, log))
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

/// Reuses a finished stage-1 result when one is given, otherwise trains it.
fn acoustic_stage(
    data: &Dataset,
    model: &ModelConfig,
    cfg: &SystemConfig,
    reuse: Option<&StageResult>,
    log: &mut TrainLog,
) -> Result<StageResult> {
    match reuse {
        Some(r) => {
            r.checkpoint.expect_stage(StageId::Am)?;
            r.checkpoint.expect_vocab(&data.vocab.hash())?;
            if r.checkpoint.meta.model.trunk != model.trunk || r.checkpoint.meta.model.am_rnn != model.am_rnn {
                return Err(Error::IncompatibleCheckpoint("reused acoustic model has another shape".into()));
            }
            Ok(r.clone())
        }
        None => train_am_ctc(data, model, &cfg.am, log),
    }
}

#[derive(Clone, Debug)]
pub struct BaselineRun {
    pub baseline: StageResult,
    pub convergence: ConvergenceLog,
}

#[derive(Clone, Debug)]
pub struct TwoStageRun {
    pub am: StageResult,
    pub lid: StageResult,
    pub convergence: ConvergenceLog,
    /// SHA-256 of `am.ckpt` right before and right after the dialect stage.
    pub am_file_hash: (String, String),
}

#[derive(Clone, Debug)]
pub struct ThreeStageRun {
    pub am: StageResult,
    pub alignments: AlignmentTable,
    pub cnn: StageResult,
    pub lid: StageResult,
    pub convergence: ConvergenceLog,
}

pub fn run_baseline(data: &Dataset, cfg: &SystemConfig, out: &Path) -> Result<BaselineRun> {
    let (model, mut log) = prepare(data, cfg, SystemKind::Baseline, out)?;
    let baseline = train_baseline(data, &model, &cfg.baseline, &mut log)?;
    baseline.checkpoint.save(&out.join(BASELINE_CKPT))?;
    let mut convergence = ConvergenceLog::default();
    convergence.push(&baseline);
    convergence.write(&out.join(CONVERGENCE_FILE))?;
    Ok(BaselineRun { baseline, convergence })
}

/// CTC acoustic model, then a dialect head on its frozen trunk features.
/// `reuse_am` skips stage 1 with an already trained result.
pub fn run_two_stage(data: &Dataset, cfg: &SystemConfig, out: &Path, reuse_am: Option<&StageResult>) -> Result<TwoStageRun> {
    let (model, mut log) = prepare(data, cfg, SystemKind::TwoStage, out)?;
    let am = acoustic_stage(data, &model, cfg, reuse_am, &mut log)?;
    let am_path = out.join(AM_CKPT);
    am.checkpoint.save(&am_path)?;
    let before = file_hash(&am_path)?;
    let lid = train_lid_on_intermediate(data, &am.checkpoint, &model, &cfg.lid, &mut log)?;
    lid.checkpoint.save(&out.join(LID_CKPT))?;
    let after = file_hash(&am_path)?;
    let mut convergence = ConvergenceLog::default();
    convergence.push(&am);
    convergence.push(&lid);
    convergence.write(&out.join(CONVERGENCE_FILE))?;
    Ok(TwoStageRun {
        am,
        lid,
        convergence,
        am_file_hash: (before, after),
    })
}

/// CTC acoustic model, forced alignment, frame-level CNN, then a dialect
/// head on the CNN's trunk features.
pub fn run_three_stage(
    data: &Dataset,
    cfg: &SystemConfig,
    out: &Path,
    reuse_am: Option<&StageResult>,
) -> Result<ThreeStageRun> {
    let (model, mut log) = prepare(data, cfg, SystemKind::ThreeStage, out)?;
    let am = acoustic_stage(data, &model, cfg, reuse_am, &mut log)?;
    am.checkpoint.save(&out.join(AM_CKPT))?;
    let (alignments, _) = align_corpus(data, &am.checkpoint)?;
    write_alignment_table(&out.join(ALIGN_FILE), &alignments)?;
    let cnn = train_frame_ce_cnn(data, &alignments, &model, &cfg.cnn, &mut log)?;
    cnn.checkpoint.save(&out.join(CNN_CKPT))?;
    let lid = train_lid_on_cnn(data, &cnn.checkpoint, &model, &cfg.lid, &mut log)?;
    lid.checkpoint.save(&out.join(LID_CKPT))?;
    let mut convergence = ConvergenceLog::default();
    for r in [&am, &cnn, &lid] {
        convergence.push(r);
    }
    convergence.write(&out.join(CONVERGENCE_FILE))?;
    Ok(ThreeStageRun {
        am,
        alignments,
        cnn,
        lid,
        convergence,
    })
}

/// A trained system ready for inference.
#[derive(Clone, Debug)]
pub enum System {
    Baseline(BaselineModel),
    TwoStage { am: AcousticModel, lid: LidHead },
    ThreeStage { cnn: FrameCnn, lid: LidHead },
}

fn load_stage(dir: &Path, file: &str, stage: StageId, manifest: &SystemManifest) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(&dir.join(file))?;
    ckpt.expect_stage(stage)?;
    ckpt.expect_vocab(&manifest.vocab_hash)?;
    Ok(ckpt)
}

impl System {
    /// Loads a system directory written by one of the `run_*` functions.
    pub fn load(dir: &Path) -> Result<(Self, SystemManifest)> {
        let manifest = SystemManifest::load(dir)?;
        let system = match manifest.kind {
            SystemKind::Baseline => {
                let c = load_stage(dir, BASELINE_CKPT, StageId::Baseline, &manifest)?;
                System::Baseline(BaselineModel {
                    config: c.meta.model,
                    params: c.params,
                })
            }
            SystemKind::TwoStage => {
                let am = load_stage(dir, AM_CKPT, StageId::Am, &manifest)?;
                let lid = load_stage(dir, LID_CKPT, StageId::Lid, &manifest)?;
                System::TwoStage {
                    am: AcousticModel {
                        config: am.meta.model,
                        params: am.params,
                    },
                    lid: LidHead {
                        config: lid.meta.model,
                        params: lid.params,
                    },
                }
            }
            SystemKind::ThreeStage => {
                let cnn = load_stage(dir, CNN_CKPT, StageId::Cnn, &manifest)?;
                let lid = load_stage(dir, LID_CKPT, StageId::Lid, &manifest)?;
                System::ThreeStage {
                    cnn: FrameCnn {
                        config: cnn.meta.model,
                        params: cnn.params,
                    },
                    lid: LidHead {
                        config: lid.meta.model,
                        params: lid.params,
                    },
                }
            }
        };
        Ok((system, manifest))
    }

    pub fn baseline(run: &BaselineRun) -> Self {
        let c = &run.baseline.checkpoint;
        System::Baseline(BaselineModel {
            config: c.meta.model.clone(),
            params: c.params.clone(),
        })
    }

    pub fn two_stage(run: &TwoStageRun) -> Self {
        System::TwoStage {
            am: AcousticModel {
                config: run.am.checkpoint.meta.model.clone(),
                params: run.am.checkpoint.params.clone(),
            },
            lid: head(&run.lid),
        }
    }

    pub fn three_stage(run: &ThreeStageRun) -> Self {
        System::ThreeStage {
            cnn: FrameCnn {
                config: run.cnn.checkpoint.meta.model.clone(),
                params: run.cnn.checkpoint.params.clone(),
            },
            lid: head(&run.lid),
        }
    }

    pub fn kind(&self) -> SystemKind {
        match self {
            System::Baseline(_) => SystemKind::Baseline,
            System::TwoStage { .. } => SystemKind::TwoStage,
            System::ThreeStage { .. } => SystemKind::ThreeStage,
        }
    }

    /// Eval-mode dialect log-probabilities for one utterance.
    pub fn dialect_log_probs(&self, features: &FeatureMatrix) -> Result<Vec<Real>> {
        match self {
            System::Baseline(m) => m.infer(features),
            System::TwoStage { am, lid } => lid.infer(&am.infer(features)?.1),
            System::ThreeStage { cnn, lid } => lid.infer(&cnn.infer(features)?.1),
        }
    }
}

fn head(r: &StageResult) -> LidHead {
    LidHead {
        config: r.checkpoint.meta.model.clone(),
        params: r.checkpoint.params.clone(),
    }
}
