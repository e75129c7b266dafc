//! Synthetic speakers for desk-scale experiments.
//!
//! Each voice is a harmonic source (fundamental frequency, spectral tilt,
//! breath noise) shaped by a formant envelope. Speakers differ in F0,
//! vocal-tract length (a scale on every formant), tilt and their own
//! formant offsets; clips of one speaker differ in vowel sequence, F0
//! contour, level and small perturbations of the same parameters.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::write_wav;
use crate::error::{Error, IoContext, Result};
use crate::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::model::stream_rng;

/// F1..F3 (Hz) of five reference vowels.
const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpeakerSpec {
    pub n_speakers: usize,
    pub clips_per_speaker: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    /// The last `test_speakers` speakers form the `test` split and the
    /// `val_speakers` before them the `val` split; the rest are `train`.
    pub val_speakers: usize,
    pub test_speakers: usize,
    pub f0_range: (f64, f64),
    pub tract_scale_range: (f64, f64),
    pub tilt_range: (f64, f64),
    pub breath_range: (f64, f64),
    pub intonation_depth_range: (f64, f64),
    pub intonation_rate_range: (f64, f64),
    pub segments_range: (usize, usize),
    /// Largest per-speaker offset of each formant, as a fraction.
    pub formant_offset: f64,
    pub seed: u64,
}

impl Default for SyntheticSpeakerSpec {
    fn default() -> Self {
        Self {
            n_speakers: 15,
            clips_per_speaker: 20,
            clip_seconds: 2.0,
            sample_rate: 16_000,
            val_speakers: 5,
            test_speakers: 0,
            f0_range: (85.0, 255.0),
            tract_scale_range: (0.82, 1.22),
            tilt_range: (0.5, 1.7),
            breath_range: (0.005, 0.05),
            intonation_depth_range: (0.02, 0.2),
            intonation_rate_range: (1.5, 6.0),
            segments_range: (6, 9),
            formant_offset: 0.12,
            seed: 0,
        }
    }
}

/// Per-clip variation around a speaker's centre, in the units of
/// [`VoiceParams::coordinates`]: `ln f0`, `ln tract_scale`, `tilt`.
pub const CLIP_VARIATION: [f64; 3] = [0.04, 0.015, 0.05];

/// Required separation between speaker centres, in multiples of the
/// per-clip variation along the most separated coordinate.
pub const MIN_SEPARATION: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoiceParams {
    pub speaker: String,
    pub f0_hz: f64,
    pub tract_scale: f64,
    pub tilt: f64,
    pub breath: f64,
    /// Depth (fraction of F0) and rate (Hz) of the pitch movement.
    pub intonation_depth: f64,
    pub intonation_rate: f64,
    /// Multiplicative offsets of F1..F4.
    pub formant_offsets: [f64; 4],
}

impl VoiceParams {
    pub fn coordinates(&self) -> [f64; 3] {
        [self.f0_hz.ln(), self.tract_scale.ln(), self.tilt]
    }

    /// Distance between speaker centres: the largest coordinate difference
    /// in units of [`CLIP_VARIATION`].
    pub fn separation(&self, other: &VoiceParams) -> f64 {
        let (a, b) = (self.coordinates(), other.coordinates());
        (0..3)
            .map(|i| (a[i] - b[i]).abs() / CLIP_VARIATION[i])
            .fold(0.0, f64::max)
    }
}

impl SyntheticSpeakerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.clips_per_speaker == 0 {
            return Err(Error::Config("synthetic corpus needs speakers and clips".into()));
        }
        if self.val_speakers + self.test_speakers >= self.n_speakers {
            return Err(Error::Config("held-out speakers leave no training speakers".into()));
        }
        if self.segments_range.0 == 0 || self.segments_range.1 < self.segments_range.0 {
            return Err(Error::Config("segments_range must be a non-empty positive range".into()));
        }
        if !(self.clip_seconds > 0.05) || self.sample_rate < 8000 {
            return Err(Error::Config("clips must be longer than 50 ms at 8 kHz or more".into()));
        }
        for (name, (lo, hi)) in [
            ("f0_range", self.f0_range),
            ("tract_scale_range", self.tract_scale_range),
            ("tilt_range", self.tilt_range),
            ("breath_range", self.breath_range),
            ("intonation_depth_range", self.intonation_depth_range),
            ("intonation_rate_range", self.intonation_rate_range),
        ] {
            if !(lo > 0.0 && hi > lo) {
                return Err(Error::Config(format!("{name} must be an increasing positive range")));
            }
        }
        Ok(())
    }

    pub fn split_of(&self, speaker: usize) -> Split {
        let n = self.n_speakers;
        if speaker >= n - self.test_speakers {
            Split::Test
        } else if speaker >= n - self.test_speakers - self.val_speakers {
            Split::Val
        } else {
            Split::Train
        }
    }

    /// Draws every speaker's voice, rejecting draws closer than
    /// [`MIN_SEPARATION`] to an earlier speaker.
    pub fn draw_voices(&self) -> Result<Vec<VoiceParams>> {
        self.validate()?;
        let mut rng = stream_rng(self.seed, &[10]);
        let mut voices: Vec<VoiceParams> = Vec::with_capacity(self.n_speakers);
        let log_uniform = |rng: &mut rand_chacha::ChaCha8Rng, (lo, hi): (f64, f64)| {
            rng.gen_range(lo.ln()..hi.ln()).exp()
        };
        for s in 0..self.n_speakers {
            let mut attempts = 0;
            let v = loop {
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::Config(format!(
                        "cannot place {} well-separated speakers in the configured ranges",
                        self.n_speakers
                    )));
                }
                let mut offsets = [0.0; 4];
                for o in &mut offsets {
                    *o = 1.0 + rng.gen_range(-self.formant_offset..=self.formant_offset);
                }
                let v = VoiceParams {
                    speaker: format!("spk{:03}", s + 1),
                    f0_hz: log_uniform(&mut rng, self.f0_range),
                    tract_scale: log_uniform(&mut rng, self.tract_scale_range),
                    tilt: rng.gen_range(self.tilt_range.0..self.tilt_range.1),
                    breath: log_uniform(&mut rng, self.breath_range),
                    intonation_depth: log_uniform(&mut rng, self.intonation_depth_range),
                    intonation_rate: log_uniform(&mut rng, self.intonation_rate_range),
                    formant_offsets: offsets,
                };
                if voices.iter().all(|o| o.separation(&v) >= MIN_SEPARATION) {
                    break v;
                }
            };
            voices.push(v);
        }
        Ok(voices)
    }
}

/// Renders one clip of a voice.
pub fn render_clip(
    voice: &VoiceParams,
    seconds: f64,
    sample_rate: u32,
    segments: (usize, usize),
    rng: &mut impl Rng,
) -> Vec<f64> {
    let fs = sample_rate as f64;
    let n = (seconds * fs).round() as usize;
    let mut jitter = |w: f64| rng.gen_range(-w..=w);
    let f0 = voice.f0_hz * jitter(CLIP_VARIATION[0]).exp();
    let scale = voice.tract_scale * jitter(CLIP_VARIATION[1]).exp();
    let tilt = voice.tilt + jitter(CLIP_VARIATION[2]);
    let vibrato_rate = voice.intonation_rate * jitter(0.1).exp();
    let vibrato_depth = voice.intonation_depth * jitter(0.1).exp();
    let declination = jitter(0.06);
    let phase0 = jitter(PI);

    let n_seg = rng.gen_range(segments.0..=segments.1);
    let vowels: Vec<[f64; 4]> = (0..n_seg)
        .map(|_| {
            let v = VOWELS[rng.gen_range(0..VOWELS.len())];
            let mut f = [v[0], v[1], v[2], 3500.0];
            for (i, x) in f.iter_mut().enumerate() {
                *x *= scale * voice.formant_offsets[i] * (1.0 + rng.gen_range(-0.02..=0.02));
            }
            f
        })
        .collect();
    let seg_gain: Vec<f64> = (0..n_seg).map(|_| 10f64.powf(rng.gen_range(-3.0..=3.0) / 20.0)).collect();

    let block = (fs / 100.0) as usize;
    let nyquist = fs / 2.0 - 200.0;
    let max_h = (nyquist / (f0 * 0.8)).floor() as usize;
    let mut phases = vec![0.0; max_h];
    let mut out = vec![0.0; n];
    let seg_len = n as f64 / n_seg as f64;
    let mut prev_amps: Option<Vec<f64>> = None;
    for b0 in (0..n).step_by(block) {
        let b1 = (b0 + block).min(n);
        let t = b0 as f64 / fs;
        // Formants glide between vowel targets over the middle of each
        // boundary.
        let pos = (b0 as f64 / seg_len - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(n_seg - 1);
        let i1 = (i0 + 1).min(n_seg - 1);
        let frac = (pos - pos.floor()).clamp(0.0, 1.0);
        let w = 0.5 - 0.5 * (PI * ((frac - 0.35) / 0.3).clamp(0.0, 1.0)).cos();
        let formants: Vec<f64> = (0..4).map(|i| vowels[i0][i] * (1.0 - w) + vowels[i1][i] * w).collect();
        let gain = seg_gain[i0] * (1.0 - w) + seg_gain[i1] * w;
        let f0_t = f0 * (1.0 + vibrato_depth * (2.0 * PI * vibrato_rate * t + phase0).sin()) * (1.0 + declination * (t / seconds - 0.5));
        let amps: Vec<f64> = (1..=max_h)
            .map(|h| {
                let f = h as f64 * f0_t;
                if f >= nyquist {
                    return 0.0;
                }
                let env: f64 = formants
                    .iter()
                    .zip([1.0, 0.7, 0.4, 0.2])
                    .map(|(&fc, g)| {
                        let bw = 60.0 + 0.06 * fc;
                        g / (1.0 + ((f - fc) / bw).powi(2))
                    })
                    .sum::<f64>()
                    + 0.01;
                gain * env * (h as f64).powf(-tilt)
            })
            .collect();
        let start = prev_amps.take().unwrap_or_else(|| amps.clone());
        let len = (b1 - b0) as f64;
        for (h, ph) in phases.iter_mut().enumerate() {
            let dphi = 2.0 * PI * (h + 1) as f64 * f0_t / fs;
            let (a0, a1) = (start[h], amps[h]);
            if a0 == 0.0 && a1 == 0.0 {
                *ph += dphi * len;
                continue;
            }
            for (j, o) in out[b0..b1].iter_mut().enumerate() {
                let a = a0 + (a1 - a0) * j as f64 / len;
                *o += a * ph.sin();
                *ph += dphi;
            }
            *ph %= 2.0 * PI;
        }
        prev_amps = Some(amps);
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let level = 0.5 * 10f64.powf(rng.gen_range(-6.0..=0.0) / 20.0) / peak;
    let ramp = (0.02 * fs) as usize;
    for (i, o) in out.iter_mut().enumerate() {
        let edge = (i.min(n - 1 - i) as f64 / ramp as f64).min(1.0);
        let noise: f64 = rng.gen_range(-1.0..1.0);
        *o = (*o * level + voice.breath * 0.5 * noise) * edge;
    }
    out
}

/// Writes the corpus: `wav/<speaker>/<clip>.wav`, `manifest.tsv` and
/// `speakers.json` with every speaker's voice parameters.
pub fn generate_synthetic_corpus(spec: &SyntheticSpeakerSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let voices = spec.draw_voices()?;
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let mut entries = Vec::with_capacity(spec.n_speakers * spec.clips_per_speaker);
    for (s, v) in voices.iter().enumerate() {
        let dir = out_dir.join("wav").join(&v.speaker);
        std::fs::create_dir_all(&dir).at(&dir)?;
        for c in 0..spec.clips_per_speaker {
            let mut rng = stream_rng(spec.seed, &[11, s as u64, c as u64]);
            let samples = render_clip(v, spec.clip_seconds, spec.sample_rate, spec.segments_range, &mut rng);
            let clip_id = format!("{}_{:03}", v.speaker, c + 1);
            let rel = PathBuf::from("wav").join(&v.speaker).join(format!("{clip_id}.wav"));
            write_wav(&out_dir.join(&rel), &samples, spec.sample_rate)?;
            entries.push(ManifestEntry {
                clip_id,
                path: rel,
                speaker: v.speaker.clone(),
                split: spec.split_of(s),
            });
        }
    }
    let manifest = DatasetManifest::new(out_dir, entries)?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    let params = out_dir.join("speakers.json");
    let json = serde_json::to_string_pretty(&serde_json::json!({ "spec": spec, "voices": voices }))?;
    std::fs::write(&params, json).at(&params)?;
    Ok(manifest)
}
