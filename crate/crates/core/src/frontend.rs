//! Log-mel filterbank features: Hamming-windowed frames, power spectrum,
//! triangular mel filters, natural log with an energy floor, then per-column
//! mean subtraction over the utterance.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

pub const SUPPORTED_RATES: [u32; 2] = [8000, 16000];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    /// FFT size; the next power of two above the frame length when unset.
    pub n_fft: Option<usize>,
    pub fmin: f64,
    /// Upper filter edge; Nyquist when unset.
    pub fmax: Option<f64>,
    pub floor_eps: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            frame_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 40,
            n_fft: None,
            fmin: 0.0,
            fmax: None,
            floor_eps: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn frame_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.frame_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self, sample_rate: u32) -> usize {
        self.n_fft
            .unwrap_or_else(|| self.frame_samples(sample_rate).next_power_of_two())
    }

    /// Frame count for `len` samples, or `None` when shorter than a frame.
    pub fn frame_count(&self, len: usize, sample_rate: u32) -> Option<usize> {
        let frame = self.frame_samples(sample_rate);
        let hop = self.hop_samples(sample_rate);
        (len >= frame).then(|| (len - frame) / hop + 1)
    }

    fn validate_filterbank(&self, sample_rate: u32) -> Result<()> {
        if !SUPPORTED_RATES.contains(&sample_rate) {
            return Err(Error::UnsupportedSampleRate(sample_rate));
        }
        let n_fft = self.fft_size(sample_rate);
        if self.n_mels == 0 || !n_fft.is_power_of_two() {
            return Err(Error::Config(format!(
                "n_mels must be positive and n_fft a power of two (got {}, {n_fft})",
                self.n_mels
            )));
        }
        Ok(())
    }

    fn validate_framing(&self, sample_rate: u32) -> Result<()> {
        let frame = self.frame_samples(sample_rate);
        if frame == 0 || self.hop_samples(sample_rate) == 0 {
            return Err(Error::Config("frame and hop must be positive".into()));
        }
        if self.fft_size(sample_rate) < frame {
            return Err(Error::Config(format!(
                "n_fft {} is shorter than the {frame}-sample frame",
                self.fft_size(sample_rate)
            )));
        }
        Ok(())
    }
}

/// Mono audio in [−1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<Real>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<Real>, sample_rate: u32) -> Result<Self> {
        if !SUPPORTED_RATES.contains(&sample_rate) {
            return Err(Error::UnsupportedSampleRate(sample_rate));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads 16-bit signed PCM, mono.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let wav_err = |msg: String| Error::Wav {
            path: path.to_path_buf(),
            msg,
        };
        let reader = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(wav_err(format!(
                "expected 16-bit PCM mono, got {} ch / {} bit / {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            )));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as Real / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| wav_err(e.to_string()))?;
        Self::new(samples, spec.sample_rate)
    }

    /// Writes 16-bit signed PCM, mono. Samples are clipped to [−1, 1].
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let wav_err = |e: hound::Error| Error::Wav {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v).map_err(wav_err)?;
        }
        writer.finalize().map_err(wav_err)
    }
}

/// `T × n_mels` features, row-major (one row per frame).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub n_mels: usize,
    pub data: Vec<Real>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, n_mels: usize, data: Vec<Real>) -> Result<Self> {
        if frames == 0 || n_mels == 0 || data.len() != frames * n_mels {
            return Err(Error::shape(format!(
                "feature matrix {frames}×{n_mels} with {} values",
                data.len()
            )));
        }
        Ok(FeatureMatrix {
            frames,
            n_mels,
            data,
        })
    }

    pub fn row(&self, t: usize) -> &[Real] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn column_means(&self) -> Vec<Real> {
        let mut means = vec![0.0; self.n_mels];
        for row in self.data.chunks(self.n_mels) {
            means.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        means.iter_mut().for_each(|m| *m /= self.frames as Real);
        means
    }

    /// Subtracts each column's mean over frames.
    pub fn mean_normalize(&mut self) {
        let means = self.column_means();
        for row in self.data.chunks_mut(self.n_mels) {
            row.iter_mut().zip(&means).for_each(|(v, m)| *v -= m);
        }
    }

    /// Writes the feature cache: `"LMFB"`, u32 T, u32 n_mels, then T×n_mels
    /// f32, all little-endian.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + self.data.len() * 4);
        buf.extend_from_slice(b"LMFB");
        buf.extend_from_slice(&(self.frames as u32).to_le_bytes());
        buf.extend_from_slice(&(self.n_mels as u32).to_le_bytes());
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let fault = |msg: &str| Error::DataFault(format!("{}: {msg}", path.display()));
        if buf.len() < 12 || &buf[..4] != b"LMFB" {
            return Err(fault("missing LMFB header"));
        }
        let word = |at: usize| u32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as usize;
        let (frames, n_mels) = (word(4), word(8));
        if buf.len() != 12 + frames * n_mels * 4 {
            return Err(fault("payload size does not match header"));
        }
        let data = buf[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect();
        Self::new(frames, n_mels, data)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `n_mels × (n_fft/2 + 1)` triangular filters, peak 1.0, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelMatrix {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<Real>,
}

impl MelMatrix {
    pub fn row(&self, m: usize) -> &[Real] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }
}

pub fn mel_matrix(config: &FrontendConfig, sample_rate: u32) -> Result<MelMatrix> {
    config.validate_filterbank(sample_rate)?;
    let n_fft = config.fft_size(sample_rate);
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let fmax = config.fmax.unwrap_or(nyquist).min(nyquist);
    let (lo, hi) = (hz_to_mel(config.fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut weights = vec![0.0; config.n_mels * n_bins];
    for m in 0..config.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = ((f - left) / (center - left)).min((right - f) / (right - center));
            if w > 0.0 {
                weights[m * n_bins + k] = w as Real;
            }
        }
        if weights[m * n_bins..(m + 1) * n_bins].iter().all(|&w| w <= 0.0) {
            return Err(Error::FilterbankDegenerate { row: m });
        }
    }
    Ok(MelMatrix {
        n_mels: config.n_mels,
        n_bins,
        weights,
    })
}

/// `|DFT|²` of a real frame zero-padded to `n_fft`, bins `0..=n_fft/2`.
pub fn power_spectrum(frame: &[Real], n_fft: usize) -> Vec<Real> {
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut scratch = vec![Complex::new(0.0, 0.0); n_fft];
    power_spectrum_with(&*fft, frame, &mut scratch)
}

fn power_spectrum_with(fft: &dyn Fft<f64>, frame: &[Real], buf: &mut [Complex<f64>]) -> Vec<Real> {
    let n_fft = buf.len();
    assert!(frame.len() <= n_fft, "frame longer than n_fft");
    for (i, c) in buf.iter_mut().enumerate() {
        *c = Complex::new(frame.get(i).copied().unwrap_or(0.0) as f64, 0.0);
    }
    fft.process(buf);
    buf[..n_fft / 2 + 1]
        .iter()
        .map(|c| c.norm_sqr() as Real)
        .collect()
}

pub fn hamming(len: usize) -> Vec<Real> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| {
            (0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos()) as Real
        })
        .collect()
}

/// Reusable feature extractor for one sample rate.
pub struct Frontend {
    config: FrontendConfig,
    sample_rate: u32,
    mel: MelMatrix,
    window: Vec<Real>,
    fft: Arc<dyn Fft<f64>>,
}

impl Frontend {
    pub fn new(config: FrontendConfig, sample_rate: u32) -> Result<Self> {
        let mel = mel_matrix(&config, sample_rate)?;
        config.validate_framing(sample_rate)?;
        let window = hamming(config.frame_samples(sample_rate));
        let fft = FftPlanner::new().plan_fft_forward(config.fft_size(sample_rate));
        Ok(Frontend {
            config,
            sample_rate,
            mel,
            window,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    /// Log mel energies before utterance normalization.
    pub fn log_mel_raw(&self, wave: &Waveform) -> Result<FeatureMatrix> {
        if wave.sample_rate != self.sample_rate {
            return Err(Error::UnsupportedSampleRate(wave.sample_rate));
        }
        let frame = self.config.frame_samples(self.sample_rate);
        let hop = self.config.hop_samples(self.sample_rate);
        let frames = self
            .config
            .frame_count(wave.samples.len(), self.sample_rate)
            .ok_or(Error::TooShort {
                samples: wave.samples.len(),
                frame,
            })?;
        let n_mels = self.mel.n_mels;
        let floor = self.config.floor_eps as Real;
        let mut data = Vec::with_capacity(frames * n_mels);
        let mut windowed = vec![0.0; frame];
        let mut buf = vec![Complex::new(0.0, 0.0); self.config.fft_size(self.sample_rate)];
        for t in 0..frames {
            let chunk = &wave.samples[t * hop..t * hop + frame];
            for ((w, s), h) in windowed.iter_mut().zip(chunk).zip(&self.window) {
                *w = s * h;
            }
            let power = power_spectrum_with(&*self.fft, &windowed, &mut buf);
            for m in 0..n_mels {
                let e: Real = self.mel.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
                data.push(e.max(floor).ln());
            }
        }
        FeatureMatrix::new(frames, n_mels, data)
    }

    pub fn features(&self, wave: &Waveform) -> Result<FeatureMatrix> {
        let mut m = self.log_mel_raw(wave)?;
        m.mean_normalize();
        Ok(m)
    }
}

/// Utterance-mean-normalized log-mel features.
pub fn log_mel_features(wave: &Waveform, config: &FrontendConfig) -> Result<FeatureMatrix> {
    Frontend::new(config.clone(), wave.sample_rate)?.features(wave)
}
