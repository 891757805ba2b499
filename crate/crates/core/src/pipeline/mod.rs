//! Training orchestration: the optimizer, the generic epoch loop, the
//! individual stages, and the three complete systems.

mod adam;
mod checkpoint;
mod stages;
mod system;
mod trainer;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{Checkpoint, CheckpointMeta, MAGIC, VERSION};
pub use stages::{
    align_corpus, train_am_ctc, train_baseline, train_frame_ce_cnn, train_lid_on_cnn, train_lid_on_intermediate,
    AlignmentTable, StageResult,
};
pub use system::{
    run_baseline, run_three_stage, run_two_stage, BaselineRun, System, SystemConfig, SystemKind, SystemManifest,
    ThreeStageRun, TwoStageRun, ALIGN_FILE, AM_CKPT, BASELINE_CKPT, CNN_CKPT, CONVERGENCE_FILE, LID_CKPT, LOG_FILE,
    SYSTEM_FILE,
};
pub use trainer::{epochs_to_converge, train_loop, EpochRecord, LoopOutcome, Objective, CONVERGENCE_TOLERANCE};

use crate::corpus::{load_features, Corpus, Manifest};
use crate::frontend::{FeatureMatrix, FrontendConfig};
use crate::models::Vocab;
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageId {
    /// CTC acoustic model.
    Am,
    /// Dialect head on frozen intermediate features.
    Lid,
    /// Frame cross-entropy CNN on forced alignments.
    Cnn,
    /// One-stage dialect classifier on raw features.
    Baseline,
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageId::Am => "am",
            StageId::Lid => "lid",
            StageId::Cnn => "cnn",
            StageId::Baseline => "baseline",
        })
    }
}

impl FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "am" => Ok(StageId::Am),
            "lid" => Ok(StageId::Lid),
            "cnn" => Ok(StageId::Cnn),
            "baseline" => Ok(StageId::Baseline),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }
}

/// Hyper-parameters of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: StageId,
    pub learning_rate: Real,
    pub weight_decay: Real,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a relative improvement above `min_delta` before stopping.
    pub patience: usize,
    pub min_delta: Real,
    pub dropout: Real,
    pub seed: u64,
    /// Share of the training manifest held out for validation.
    pub val_fraction: Real,
}

impl TrainConfig {
    pub fn for_stage(stage: StageId) -> Self {
        let (learning_rate, max_epochs, dropout) = match stage {
            StageId::Am | StageId::Cnn => (1e-3, 30, 0.0),
            StageId::Lid | StageId::Baseline => (3e-4, 20, 0.5),
        };
        TrainConfig {
            stage,
            learning_rate,
            weight_decay: 1e-4,
            batch_size: 8,
            max_epochs,
            patience: 3,
            min_delta: 1e-3,
            dropout,
            seed: 0,
            val_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("{} stage: {msg}", self.stage)));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.weight_decay < 0.0 || self.learning_rate * self.weight_decay >= 1.0 {
            return bad("weight_decay must satisfy 0 ≤ lr·wd < 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be ≥ 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if matches!(self.stage, StageId::Am | StageId::Cnn) && self.dropout != 0.0 {
            return bad("acoustic stages train without dropout");
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 0.5)");
        }
        Ok(())
    }

    /// Deterministic per-step seed for dropout masks and shuffling.
    pub(crate) fn step_seed(&self, epoch: usize, item: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((epoch as u64) << 32)
            .wrapping_add(item as u64)
    }
}

/// One utterance with its features and references.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub utt_id: String,
    pub features: FeatureMatrix,
    pub duration: f64,
    pub dialect: usize,
    pub labels: Vec<usize>,
}

/// Featurized split ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub vocab: Vocab,
    pub n_dialects: usize,
    pub frontend: FrontendConfig,
}

impl Dataset {
    pub fn from_manifest(
        root: &Path,
        manifest: &Manifest,
        vocab: Vocab,
        n_dialects: usize,
        frontend: &FrontendConfig,
        cache: Option<&Path>,
    ) -> Result<Self> {
        let features = load_features(root, manifest, frontend, cache)?;
        let utterances = manifest
            .records
            .iter()
            .zip(features)
            .map(|(r, features)| Utterance {
                utt_id: r.utt_id.clone(),
                features,
                duration: r.duration,
                dialect: r.dialect,
                labels: r.labels.clone(),
            })
            .collect();
        Ok(Dataset {
            utterances,
            vocab,
            n_dialects,
            frontend: frontend.clone(),
        })
    }

    /// Training and test sets of a corpus directory.
    pub fn load_corpus(corpus: &Corpus, frontend: &FrontendConfig, cache: Option<&Path>) -> Result<(Self, Self)> {
        let n = corpus.n_dialects();
        let train = Self::from_manifest(&corpus.root, &corpus.train, corpus.vocab.clone(), n, frontend, cache)?;
        let test = Self::from_manifest(&corpus.root, &corpus.test, corpus.vocab.clone(), n, frontend, cache)?;
        Ok((train, test))
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Deterministic hold-out: every k-th utterance, k = round(1/fraction).
    /// Returns (train indices, validation indices).
    pub fn split_indices(&self, val_fraction: Real) -> (Vec<usize>, Vec<usize>) {
        split_indices(self.len(), val_fraction)
    }
}

pub(crate) fn split_indices(n: usize, val_fraction: Real) -> (Vec<usize>, Vec<usize>) {
    if val_fraction <= 0.0 {
        return ((0..n).collect(), Vec::new());
    }
    let k = (1.0 / val_fraction).round().max(2.0) as usize;
    (0..n).partition(|i| i % k != k - 1)
}

/// Per-stage epochs-to-converge, in execution order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLog {
    pub entries: Vec<ConvergenceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceEntry {
    pub stage: StageId,
    /// First epoch whose validation metric was within tolerance of the best.
    pub epochs: usize,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_metric: Real,
}

impl ConvergenceLog {
    pub fn push(&mut self, result: &StageResult) {
        self.entries.push(ConvergenceEntry {
            stage: result.checkpoint.meta.stage,
            epochs: result.epochs_to_converge,
            best_epoch: result.best_epoch,
            epochs_run: result.epochs_run,
            best_metric: result.best_metric,
        });
    }

    pub fn epochs(&self, stage: StageId) -> Option<usize> {
        self.entries.iter().find(|e| e.stage == stage).map(|e| e.epochs)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// JSON-lines training log. Lines are kept in memory and, when opened on a
/// file, also flushed there as they arrive.
#[derive(Default)]
pub struct TrainLog {
    file: Option<BufWriter<File>>,
    lines: Vec<String>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    stage: StageId,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn append_to(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(TrainLog {
            file: Some(BufWriter::new(file)),
            lines: Vec::new(),
        })
    }

    pub fn record(&mut self, stage: StageId, record: &EpochRecord) {
        let line = serde_json::to_string(&LogLine { stage, record }).expect("log lines serialize");
        log::info!("{line}");
        if let Some(f) = &mut self.file {
            // The log is diagnostic; a failed write must not abort training.
            if writeln!(f, "{line}").and_then(|_| f.flush()).is_err() {
                log::warn!("could not append to the training log");
            }
        }
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}

/// Caps rayon's global pool at `LID_THREADS` workers when the variable is
/// set. Only the first call has an effect.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("LID_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("LID_THREADS must be a positive integer, got `{value}`")))?;
    // A second initialization attempt is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Levenshtein distance between two token sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
