//! Log mel-filterbank front end and SpecAugment masking.
//!
//! Pipeline per clip: pre-emphasis, Hamming-windowed frames, power spectrum,
//! HTK-style triangular mel filters, natural log with an energy floor.
//! Features are then mean-normalised over time. No voice-activity detection
//! is applied anywhere.

use std::f64::consts::PI;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct WaveformClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    /// Global speaker class in `1..=N'`.
    pub speaker_id: usize,
    pub clip_id: String,
}

impl WaveformClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
            speaker_id: 0,
            clip_id: String::new(),
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub preemphasis: f64,
    pub f_min: f64,
    /// Upper edge of the filterbank; `None` means Nyquist.
    pub f_max: Option<f64>,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            window_ms: 25.0,
            hop_ms: 10.0,
            preemphasis: 0.97,
            f_min: 20.0,
            f_max: None,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// Frame count for a clip of `num_samples`, or `None` if shorter than
    /// one window.
    pub fn num_frames(&self, num_samples: usize, sample_rate: u32) -> Option<usize> {
        let w = self.window_samples(sample_rate);
        let h = self.hop_samples(sample_rate).max(1);
        (num_samples >= w && w > 0).then(|| (num_samples - w) / h + 1)
    }
}

/// An `n_mels x T` log-energy matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelFeatures {
    pub values: Tensor,
}

impl LogMelFeatures {
    pub fn new(values: Tensor) -> Self {
        assert_eq!(values.rank(), 2, "features must be n_mels x T");
        Self { values }
    }

    pub fn n_mels(&self) -> usize {
        self.values.dim(0)
    }

    pub fn frames(&self) -> usize {
        self.values.dim(1)
    }

    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values.data()[mel * self.frames() + frame]
    }

    pub fn row(&self, mel: usize) -> &[f64] {
        self.values.row(mel)
    }

    /// Frames `start..start + len`.
    pub fn crop(&self, start: usize, len: usize) -> LogMelFeatures {
        assert!(start + len <= self.frames(), "crop out of range");
        let t = self.frames();
        let mut data = Vec::with_capacity(self.n_mels() * len);
        for m in 0..self.n_mels() {
            data.extend_from_slice(&self.values.data()[m * t + start..m * t + start + len]);
        }
        LogMelFeatures::new(Tensor::from_vec(&[self.n_mels(), len], data))
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the mel filters, lowest first.
pub fn mel_center_frequencies(config: &FeatureConfig, sample_rate: u32) -> Vec<f64> {
    let edges = mel_edges(config, sample_rate);
    edges[1..edges.len() - 1].to_vec()
}

fn mel_edges(config: &FeatureConfig, sample_rate: u32) -> Vec<f64> {
    let f_max = config.f_max.unwrap_or(sample_rate as f64 / 2.0);
    let (lo, hi) = (hz_to_mel(config.f_min), hz_to_mel(f_max));
    (0..config.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect()
}

/// Triangular filter weights, `n_mels x (n_fft/2 + 1)`, row-major.
fn mel_filterbank(config: &FeatureConfig, sample_rate: u32, n_fft: usize) -> Vec<f64> {
    let n_bins = n_fft / 2 + 1;
    let edges = mel_edges(config, sample_rate);
    let mut fb = vec![0.0; config.n_mels * n_bins];
    for m in 0..config.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb[m * n_bins + k] = w;
        }
    }
    fb
}

/// Log mel-filterbank features of a clip (not yet mean-normalised).
pub fn compute_log_mel(clip: &WaveformClip, config: &FeatureConfig) -> Result<LogMelFeatures> {
    if clip.sample_rate == 0 {
        return Err(Error::InvalidInput("sample rate must be positive".into()));
    }
    if clip.samples.is_empty() {
        return Err(Error::InvalidInput(format!("clip '{}' has no samples", clip.clip_id)));
    }
    let sr = clip.sample_rate;
    let window = config.window_samples(sr);
    let hop = config.hop_samples(sr);
    if window == 0 || hop == 0 {
        return Err(Error::InvalidInput("window and hop must span at least one sample".into()));
    }
    let frames = config
        .num_frames(clip.samples.len(), sr)
        .ok_or(Error::ClipTooShort {
            samples: clip.samples.len(),
            window,
        })?;

    let mut emphasized = Vec::with_capacity(clip.samples.len());
    emphasized.push(clip.samples[0]);
    for w in clip.samples.windows(2) {
        emphasized.push(w[1] - config.preemphasis * w[0]);
    }

    let n_fft = window.next_power_of_two();
    let n_bins = n_fft / 2 + 1;
    let hamming: Vec<f64> = (0..window)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (window - 1).max(1) as f64).cos())
        .collect();
    let fb = mel_filterbank(config, sr, n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);

    let mut out = vec![0.0; config.n_mels * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_bins];
    for t in 0..frames {
        let frame = &emphasized[t * hop..t * hop + window];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < window {
                Complex::new(frame[i] * hamming[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for m in 0..config.n_mels {
            let e: f64 = fb[m * n_bins..(m + 1) * n_bins]
                .iter()
                .zip(&power)
                .map(|(w, p)| w * p)
                .sum();
            out[m * frames + t] = e.max(config.log_floor).ln();
        }
    }
    Ok(LogMelFeatures::new(Tensor::from_vec(&[config.n_mels, frames], out)))
}

/// Subtracts each mel bin's temporal mean.
pub fn mean_normalize(features: &LogMelFeatures) -> LogMelFeatures {
    let t = features.frames();
    let mut data = features.values.data().to_vec();
    for row in data.chunks_mut(t) {
        let mean = row.iter().sum::<f64>() / t as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    LogMelFeatures::new(Tensor::from_vec(features.values.shape(), data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugmentConfig {
    pub max_time_frames: usize,
    pub max_freq_bins: usize,
    pub mask_value: f64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            max_time_frames: 10,
            max_freq_bins: 8,
            mask_value: 0.0,
        }
    }
}

/// The masks drawn for one utterance, as (start, width) pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskDraw {
    pub time: (usize, usize),
    pub freq: (usize, usize),
}

/// Applies one time mask and one frequency mask. Widths are uniform in
/// `0..=max` (clamped to the feature extent), starts uniform over valid
/// positions.
pub fn spec_augment(
    features: &LogMelFeatures,
    config: &SpecAugmentConfig,
    rng: &mut impl Rng,
) -> (LogMelFeatures, MaskDraw) {
    let (n_mels, t) = (features.n_mels(), features.frames());
    let tw = rng.gen_range(0..=config.max_time_frames.min(t));
    let ts = rng.gen_range(0..=t - tw);
    let fw = rng.gen_range(0..=config.max_freq_bins.min(n_mels));
    let fs = rng.gen_range(0..=n_mels - fw);
    let draw = MaskDraw {
        time: (ts, tw),
        freq: (fs, fw),
    };
    (apply_masks(features, draw, config.mask_value), draw)
}

pub fn apply_masks(features: &LogMelFeatures, draw: MaskDraw, value: f64) -> LogMelFeatures {
    let t = features.frames();
    let mut data = features.values.data().to_vec();
    for (m, row) in data.chunks_mut(t).enumerate() {
        if m >= draw.freq.0 && m < draw.freq.0 + draw.freq.1 {
            row.iter_mut().for_each(|v| *v = value);
        } else {
            row[draw.time.0..draw.time.0 + draw.time.1]
                .iter_mut()
                .for_each(|v| *v = value);
        }
    }
    LogMelFeatures::new(Tensor::from_vec(features.values.shape(), data))
}
