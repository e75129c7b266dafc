//! WAV input/output, resampling and manifest-wide feature extraction.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::features::{compute_log_mel, mean_normalize, FeatureConfig, LogMelFeatures, WaveformClip};
use crate::manifest::DatasetManifest;

pub const CANONICAL_RATE: u32 = 16_000;

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a mono WAV file (integer PCM or float) as samples in `[-1, 1]`.
pub fn read_wav(path: &Path) -> Result<WaveformClip> {
    let mut r = hound::WavReader::open(path).map_err(wav_err(path))?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(Error::InvalidInput(format!(
            "{}: expected a single channel, found {}",
            path.display(),
            spec.channels
        )));
    }
    let samples = match spec.sample_format {
        hound::SampleFormat::Float => r
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<Vec<_>, _>>(),
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect()
        }
    }
    .map_err(wav_err(path))?;
    Ok(WaveformClip::new(samples, spec.sample_rate))
}

/// Writes 16-bit PCM, clipping to `[-1, 1]`.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err(path))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        w.write_sample(v).map_err(wav_err(path))?;
    }
    w.finalize().map_err(wav_err(path))
}

/// Band-limited resampling of a whole signal by spectrum truncation or
/// zero-padding.
pub fn resample(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let n = samples.len();
    let m = ((n as u64 * to as u64 + from as u64 / 2) / from as u64).max(1) as usize;
    let mut planner = FftPlanner::<f64>::new();
    let mut spec: Vec<Complex<f64>> = samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut spec);
    let mut out = vec![Complex::new(0.0, 0.0); m];
    // Copy the shared band; bins at or above the smaller Nyquist are dropped.
    let half = n.min(m).div_ceil(2);
    for k in 0..half {
        out[k] = spec[k];
        if k > 0 {
            out[m - k] = spec[n - k];
        }
    }
    planner.plan_fft_inverse(m).process(&mut out);
    out.iter().map(|c| c.re / n as f64).collect()
}

/// Reads a clip and brings it to the canonical sample rate.
pub fn load_clip(path: &Path) -> Result<WaveformClip> {
    let clip = read_wav(path)?;
    if clip.sample_rate == 0 {
        return Err(Error::InvalidInput(format!("{}: zero sample rate", path.display())));
    }
    Ok(if clip.sample_rate == CANONICAL_RATE {
        clip
    } else {
        WaveformClip::new(resample(&clip.samples, clip.sample_rate, CANONICAL_RATE), CANONICAL_RATE)
    })
}

/// Mean-normalised log-mel features for a waveform.
pub fn clip_features(clip: &WaveformClip, cfg: &FeatureConfig) -> Result<LogMelFeatures> {
    Ok(mean_normalize(&compute_log_mel(clip, cfg)?))
}

/// Features for every manifest entry, in entry order. Unreadable clips are
/// reported together.
pub fn extract_features(manifest: &DatasetManifest, cfg: &FeatureConfig) -> Result<Vec<LogMelFeatures>> {
    let mut out = Vec::with_capacity(manifest.len());
    let mut problems = Vec::new();
    for e in manifest.entries() {
        match load_clip(&manifest.resolve(e)).and_then(|c| clip_features(&c, cfg)) {
            Ok(f) => out.push(f),
            Err(err) => problems.push(format!("clip {}: {err}", e.clip_id)),
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Manifest(problems))
    }
}
