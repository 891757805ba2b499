//! Corpus manifests and a deterministic synthetic dialect corpus.
//!
//! A manifest is UTF-8 TSV with a `# split: <train|test>` first line and
//! one record per line:
//!
//! ```text
//! utt_id<TAB>relative wav path<TAB>duration s<TAB>dialect id<TAB>space-separated phoneme ids
//! ```
//!
//! The synthetic generator renders each utterance as a chain of 80–200 ms
//! harmonic "phoneme" segments. Every phoneme has its own fundamental and
//! harmonic balance; every dialect realizes each phoneme with its own pitch
//! contour (rising, falling, peak or dip) and a slight register shift. The
//! four contours have the same pitch histogram, so only a model that knows
//! which phoneme it is looking at can read the dialect off the contour.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::frontend::{FeatureMatrix, Frontend, FrontendConfig, Waveform};
use crate::models::Vocab;
use crate::{Error, Real, Result};

pub const TRAIN_MANIFEST: &str = "train.tsv";
pub const TEST_MANIFEST: &str = "test.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const DIALECTS_FILE: &str = "dialects.txt";
pub const SPEC_FILE: &str = "synth.toml";
/// Test sub-task boundary in seconds (≤ is "short").
pub const SHORT_MAX_SECS: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub duration: f64,
    pub dialect: usize,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub split: Split,
    pub records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn new(split: Split, records: Vec<UtteranceRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.utt_id.as_str()) {
                return Err(Error::DuplicateId(r.utt_id.clone()));
            }
        }
        Ok(Manifest { split, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("# split: {}\n", self.split);
        for r in &self.records {
            let labels: Vec<String> = r.labels.iter().map(usize::to_string).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.utt_id,
                r.path.display(),
                r.duration,
                r.dialect,
                labels.join(" ")
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut split = None;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let fault = |msg: String| Error::ParseFault { line: line_no, msg };
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(tag) = comment.trim().strip_prefix("split:") {
                    split = Some(match tag.trim() {
                        "train" => Split::Train,
                        "test" => Split::Test,
                        other => return Err(fault(format!("unknown split {other:?}"))),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(fault(format!("expected 5 tab-separated fields, found {}", fields.len())));
            }
            let duration: f64 = fields[2]
                .parse()
                .map_err(|_| fault(format!("bad duration {:?}", fields[2])))?;
            if !(duration > 0.0 && duration.is_finite()) {
                return Err(fault(format!("duration must be positive, got {duration}")));
            }
            let dialect = fields[3]
                .parse()
                .map_err(|_| fault(format!("bad dialect id {:?}", fields[3])))?;
            let labels = fields[4]
                .split_whitespace()
                .map(|t| match t.parse::<usize>() {
                    Ok(0) => Err(fault("phoneme id 0 is reserved for the blank".into())),
                    Ok(v) => Ok(v),
                    Err(_) => Err(fault(format!("bad phoneme id {t:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            if fields[0].is_empty() {
                return Err(fault("empty utterance id".into()));
            }
            records.push(UtteranceRecord {
                utt_id: fields[0].to_string(),
                path: PathBuf::from(fields[1]),
                duration,
                dialect,
                labels,
            });
        }
        let split = split.ok_or(Error::ParseFault {
            line: 1,
            msg: "missing `# split:` header".into(),
        })?;
        Manifest::new(split, records)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Records whose audio is absent under `root`.
    pub fn missing_audio(&self, root: &Path) -> Vec<&str> {
        self.records
            .iter()
            .filter(|r| !root.join(&r.path).is_file())
            .map(|r| r.utt_id.as_str())
            .collect()
    }

    pub fn n_dialects(&self) -> usize {
        self.records.iter().map(|r| r.dialect + 1).max().unwrap_or(0)
    }
}

/// Parses and validates a manifest file; logs a warning for records whose
/// audio is missing.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = Manifest::parse(&text)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let missing = manifest.missing_audio(root);
    if !missing.is_empty() {
        log::warn!(
            "{}: {} record(s) without audio, first: {}",
            path.display(),
            missing.len(),
            missing[0]
        );
    }
    Ok(manifest)
}

/// Partitions by duration: `≤ threshold` first, `> threshold` second.
pub fn split_by_duration(manifest: &Manifest, threshold: f64) -> (Manifest, Manifest) {
    let (short, long): (Vec<_>, Vec<_>) = manifest
        .records
        .iter()
        .cloned()
        .partition(|r| r.duration <= threshold);
    (
        Manifest {
            split: manifest.split,
            records: short,
        },
        Manifest {
            split: manifest.split,
            records: long,
        },
    )
}

/// A corpus directory: both manifests, the phoneme inventory and dialect
/// names.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub train: Manifest,
    pub test: Manifest,
    pub vocab: Vocab,
    pub dialects: Vec<String>,
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Self> {
        let train = load_manifest(&root.join(TRAIN_MANIFEST))?;
        let test = load_manifest(&root.join(TEST_MANIFEST))?;
        let vocab = Vocab::load(&root.join(VOCAB_FILE))?;
        let n = train.n_dialects().max(test.n_dialects());
        let names_path = root.join(DIALECTS_FILE);
        let dialects = if names_path.is_file() {
            std::fs::read_to_string(&names_path)
                .map_err(|e| Error::io(&names_path, e))?
                .lines()
                .map(str::to_string)
                .collect()
        } else {
            (0..n).map(|d| format!("d{d}")).collect::<Vec<_>>()
        };
        if dialects.len() < n {
            return Err(Error::DataFault(format!(
                "{} names {} dialects, manifests use {n}",
                names_path.display(),
                dialects.len()
            )));
        }
        for r in train.records.iter().chain(&test.records) {
            if r.labels.iter().any(|&l| l > vocab.len()) {
                return Err(Error::DataFault(format!(
                    "{} has phoneme ids beyond the {}-unit vocabulary",
                    r.utt_id,
                    vocab.len()
                )));
            }
        }
        Ok(Corpus {
            root: root.to_path_buf(),
            train,
            test,
            vocab,
            dialects,
        })
    }

    pub fn n_dialects(&self) -> usize {
        self.dialects.len()
    }
}

/// Reads (or computes and caches) utterance-normalized features for every
/// record, in manifest order. With `cache_dir`, features are read from
/// `<cache_dir>/<utt_id>.lmfb` when present and written there otherwise.
pub fn load_features(
    root: &Path,
    manifest: &Manifest,
    config: &FrontendConfig,
    cache_dir: Option<&Path>,
) -> Result<Vec<FeatureMatrix>> {
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    manifest
        .records
        .par_iter()
        .map(|r| {
            let cached = cache_dir.map(|d| d.join(format!("{}.lmfb", r.utt_id)));
            if let Some(path) = cached.as_ref().filter(|p| p.is_file()) {
                return FeatureMatrix::read_cache(path);
            }
            let wave = Waveform::read_wav(&root.join(&r.path))?;
            let features = Frontend::new(config.clone(), wave.sample_rate)?.features(&wave)?;
            if let Some(path) = cached {
                features.write_cache(&path)?;
            }
            Ok(features)
        })
        .collect()
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_dialects: usize,
    pub vocab_size: usize,
    pub train_per_dialect: usize,
    pub test_per_dialect: usize,
    pub min_duration: f64,
    pub max_duration: f64,
    pub sample_rate: u32,
    pub seed: u64,
    pub segment_ms: [f64; 2],
    /// Fundamental of the lowest and highest phoneme, Hz.
    pub f0_range: [f64; 2],
    /// Peak contour excursion in log-frequency (0.05 ≈ ±5 %).
    pub tone_depth: f64,
    /// Largest per-dialect register shift, relative.
    pub dialect_shift: f64,
    /// Per-utterance speaker register jitter, relative.
    pub speaker_jitter: f64,
    pub snr_db: f64,
    /// Transcribe each segment as a (phoneme, contour) unit, like tonal
    /// syllable inventories. The label alphabet then has `vocab_size` units
    /// built from `vocab_size / 4` base phonemes.
    pub tonal_labels: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_dialects: 4,
            vocab_size: 12,
            train_per_dialect: 50,
            test_per_dialect: 20,
            min_duration: 1.0,
            max_duration: 6.0,
            sample_rate: 16000,
            seed: 0,
            segment_ms: [80.0, 200.0],
            f0_range: [250.0, 2000.0],
            tone_depth: 0.05,
            dialect_shift: 0.01,
            speaker_jitter: 0.03,
            snr_db: 20.0,
            tonal_labels: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_dialects < 2 || self.vocab_size < 2 {
            return bad("need at least 2 dialects and 2 phonemes");
        }
        if self.tonal_labels && (self.vocab_size % TONES != 0 || self.vocab_size < 2 * TONES) {
            return bad("tonal labels need a vocabulary that is a multiple of 4 (at least 8)");
        }
        if !(self.min_duration > 0.0 && self.min_duration <= self.max_duration) {
            return bad("duration range must satisfy 0 < min ≤ max");
        }
        if !(self.segment_ms[0] > 0.0 && self.segment_ms[0] <= self.segment_ms[1]) {
            return bad("segment range must satisfy 0 < min ≤ max");
        }
        if self.min_duration * 1000.0 < self.segment_ms[0] {
            return bad("utterances must hold at least one segment");
        }
        if !crate::frontend::SUPPORTED_RATES.contains(&self.sample_rate) {
            return Err(Error::UnsupportedSampleRate(self.sample_rate));
        }
        if self.f0_range[1] * 3.0 * (self.tone_depth + self.speaker_jitter + self.dialect_shift).exp() >= self.sample_rate as f64 / 2.0 {
            return bad("third harmonic of the highest phoneme exceeds Nyquist");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Number of distinct base phonemes (segments with their own signature).
    pub fn base_phonemes(&self) -> usize {
        if self.tonal_labels {
            self.vocab_size / TONES
        } else {
            self.vocab_size
        }
    }

    /// Label id of base phoneme `p` (1-based) spoken with `tone`.
    pub fn label(&self, p: usize, tone: usize) -> usize {
        if self.tonal_labels {
            (p - 1) * TONES + tone + 1
        } else {
            p
        }
    }

    /// Fundamental of base phoneme `p` (1-based), geometric across the range.
    pub fn phoneme_f0(&self, p: usize) -> f64 {
        let [lo, hi] = self.f0_range;
        lo * (hi / lo).powf((p - 1) as f64 / (self.base_phonemes() - 1) as f64)
    }

    /// Relative amplitudes of harmonics 1–3 for phoneme `p`.
    pub fn phoneme_harmonics(&self, p: usize) -> [f64; 3] {
        [1.0, 0.25 + 0.15 * (p % 4) as f64, 0.1 + 0.1 * ((p * 3) % 5) as f64]
    }

    /// Contour id (0 rising, 1 falling, 2 peak, 3 dip) of phoneme `p` in
    /// dialect `d`. The first four dialects use a Latin square so every
    /// dialect uses every contour equally often; further dialects draw theirs
    /// from the corpus seed.
    pub fn tone(&self, d: usize, p: usize) -> usize {
        if d < 4 {
            return (p + d) % TONES;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x746f_6e65);
        rng.set_stream(d as u64);
        let mut tones: Vec<usize> = (0..self.base_phonemes()).map(|i| i % TONES).collect();
        tones.shuffle(&mut rng);
        tones[p - 1]
    }

    /// Register multiplier of dialect `d`, spread evenly over
    /// `±dialect_shift`.
    pub fn dialect_register(&self, d: usize) -> f64 {
        let half = (self.n_dialects - 1) as f64 / 2.0;
        1.0 + self.dialect_shift * (d as f64 - half) / half
    }
}

/// Number of contour shapes.
pub const TONES: usize = 4;

/// Log-frequency offset of contour `tone` at relative position `u ∈ [0, 1]`.
/// Each contour sweeps `[−depth, depth]` linearly, so all four share one
/// pitch distribution.
pub fn contour(tone: usize, u: f64, depth: f64) -> f64 {
    let ramp = 2.0 * u - 1.0;
    let tent = 1.0 - 2.0 * ramp.abs();
    depth
        * match tone {
            0 => ramp,
            1 => -ramp,
            2 => tent,
            _ => -tent,
        }
}

struct Planned {
    record: UtteranceRecord,
    stream: u64,
}

/// Renders one utterance; returns samples and the phoneme sequence.
fn render(spec: &SynthSpec, dialect: usize, duration: f64, rng: &mut ChaCha8Rng) -> (Vec<Real>, Vec<usize>) {
    let sr = spec.sample_rate as f64;
    let total = (duration * sr).round() as usize;
    let [seg_lo, seg_hi] = spec.segment_ms.map(|ms| (ms / 1000.0 * sr).round() as usize);

    // Segment lengths; a remainder shorter than a minimum segment is merged
    // into the last one.
    let mut lengths = Vec::new();
    let mut used = 0;
    while used < total {
        let len = rng.gen_range(seg_lo..=seg_hi).min(total - used);
        if len < seg_lo && !lengths.is_empty() {
            *lengths.last_mut().unwrap() += len;
        } else {
            lengths.push(len);
        }
        used += len;
    }
    let mut phonemes: Vec<usize> = Vec::with_capacity(lengths.len());
    for _ in 0..lengths.len() {
        let p = loop {
            let p = rng.gen_range(1..=spec.base_phonemes());
            if phonemes.last() != Some(&p) {
                break p;
            }
        };
        phonemes.push(p);
    }
    let labels = phonemes.iter().map(|&p| spec.label(p, spec.tone(dialect, p))).collect();

    let speaker = (rng.gen_range(-1.0..1.0) * spec.speaker_jitter).exp();
    let register = spec.dialect_register(dialect) * speaker;
    let fade = (0.01 * sr) as usize;
    let mut samples = Vec::with_capacity(total);
    let mut phase = rng.gen_range(0.0..2.0 * PI);
    for (&len, &p) in lengths.iter().zip(&phonemes) {
        let f0 = spec.phoneme_f0(p) * register;
        let amps = spec.phoneme_harmonics(p);
        let tone = spec.tone(dialect, p);
        for n in 0..len {
            let u = n as f64 / (len - 1).max(1) as f64;
            let f = f0 * contour(tone, u, spec.tone_depth).exp();
            phase = (phase + 2.0 * PI * f / sr) % (2.0 * PI);
            let env = (n.min(len - 1 - n) as f64 / fade as f64).min(1.0);
            let env = 0.5 - 0.5 * (PI * env).cos();
            let v: f64 = amps
                .iter()
                .enumerate()
                .map(|(k, a)| a * ((k + 1) as f64 * phase).sin())
                .sum();
            samples.push(env * v);
        }
    }

    let power = samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64;
    let noise = Normal::new(0.0, (power / 10f64.powf(spec.snr_db / 10.0)).sqrt()).expect("finite σ");
    for s in &mut samples {
        *s += noise.sample(rng);
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = 0.8 / peak.max(1e-9);
    (samples.into_iter().map(|v| (v * gain) as Real).collect(), labels)
}

/// Generates the synthetic corpus into `out_dir` (WAVs, both manifests,
/// vocabulary, dialect names and the spec itself). Deterministic in `spec`.
pub fn synth_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<(Manifest, Manifest)> {
    spec.validate()?;
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let mut plan = Vec::new();
    for (split, per) in [(Split::Train, spec.train_per_dialect), (Split::Test, spec.test_per_dialect)] {
        for d in 0..spec.n_dialects {
            for k in 0..per {
                let utt_id = format!("{split}_d{d}_{k:04}");
                plan.push(Planned {
                    record: UtteranceRecord {
                        path: PathBuf::from("wav").join(format!("{utt_id}.wav")),
                        utt_id,
                        duration: 0.0,
                        dialect: d,
                        labels: Vec::new(),
                    },
                    stream: plan.len() as u64,
                });
            }
        }
    }

    let records: Vec<(Split, UtteranceRecord)> = plan
        .into_par_iter()
        .map(|Planned { mut record, stream }| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(stream);
            let duration = rng.gen_range(spec.min_duration..=spec.max_duration);
            let (samples, labels) = render(spec, record.dialect, duration, &mut rng);
            let wave = Waveform::new(samples, spec.sample_rate)?;
            wave.write_wav(&out_dir.join(&record.path))?;
            record.duration = wave.duration_secs();
            record.labels = labels;
            let split = if record.utt_id.starts_with("train") { Split::Train } else { Split::Test };
            Ok((split, record))
        })
        .collect::<Result<_>>()?;

    let (train, test): (Vec<_>, Vec<_>) = records.into_iter().partition(|(s, _)| *s == Split::Train);
    let train = Manifest::new(Split::Train, train.into_iter().map(|(_, r)| r).collect())?;
    let test = Manifest::new(Split::Test, test.into_iter().map(|(_, r)| r).collect())?;
    train.write(&out_dir.join(TRAIN_MANIFEST))?;
    test.write(&out_dir.join(TEST_MANIFEST))?;
    Vocab::synthetic(spec.vocab_size).write(&out_dir.join(VOCAB_FILE))?;
    let names: String = (0..spec.n_dialects).map(|d| format!("d{d}\n")).collect();
    let names_path = out_dir.join(DIALECTS_FILE);
    std::fs::write(&names_path, names).map_err(|e| Error::io(&names_path, e))?;
    let spec_path = out_dir.join(SPEC_FILE);
    let spec_text = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&spec_path, spec_text).map_err(|e| Error::io(&spec_path, e))?;
    Ok((train, test))
}

/// Accuracy of a multinomial logistic regression on per-utterance mean
/// vectors, trained by full-batch gradient descent on standardized inputs.
/// Used to confirm that a corpus is not separable from average spectra alone.
pub fn mean_vector_probe(
    train: &[(Vec<Real>, usize)],
    test: &[(Vec<Real>, usize)],
    classes: usize,
    steps: usize,
) -> f64 {
    let dim = train.first().map_or(0, |(x, _)| x.len());
    let n = train.len() as f64;
    let mut mu = vec![0.0f64; dim];
    let mut sd = vec![0.0f64; dim];
    for (x, _) in train {
        mu.iter_mut().zip(x).for_each(|(m, v)| *m += *v as f64 / n);
    }
    for (x, _) in train {
        sd.iter_mut().zip(x).zip(&mu).for_each(|((s, v), m)| *s += (*v as f64 - m).powi(2) / n);
    }
    sd.iter_mut().for_each(|s| *s = s.sqrt().max(1e-9));
    let standardize = |x: &[Real]| -> Vec<f64> {
        x.iter().zip(&mu).zip(&sd).map(|((v, m), s)| (*v as f64 - m) / s).collect()
    };
    let xs: Vec<Vec<f64>> = train.iter().map(|(x, _)| standardize(x)).collect();
    let mut w = vec![vec![0.0f64; dim + 1]; classes];
    let scores = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|row| row[dim] + row[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    let lr = 0.5;
    for _ in 0..steps {
        let mut grad = vec![vec![0.0f64; dim + 1]; classes];
        for (x, (_, y)) in xs.iter().zip(train) {
            let s = scores(&w, x);
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - max).exp()).sum();
            for (c, g) in grad.iter_mut().enumerate() {
                let p = (s[c] - max).exp() / z - if c == *y { 1.0 } else { 0.0 };
                g[..dim].iter_mut().zip(x).for_each(|(gi, xi)| *gi += p * xi / n);
                g[dim] += p / n;
            }
        }
        for (row, g) in w.iter_mut().zip(&grad) {
            row.iter_mut().zip(g).for_each(|(a, b)| *a -= lr * b);
        }
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let s = scores(&w, &standardize(x));
            (0..classes).fold(0, |b, c| if s[c] > s[b] { c } else { b }) == *y
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}
