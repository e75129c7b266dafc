//! Log-mel features of a synthetic vowel, before and after normalisation
//! and SpecAugment masking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use relnet_speaker::features::{
    compute_log_mel, mean_normalize, mel_center_frequencies, spec_augment, FeatureConfig, SpecAugmentConfig,
    WaveformClip,
};

fn main() -> relnet_speaker::Result<()> {
    let sr = 16_000;
    let samples: Vec<f64> = (0..sr)
        .map(|n| {
            let t = n as f64 / sr as f64;
            [(220.0, 1.0), (440.0, 0.5), (880.0, 0.25)]
                .iter()
                .map(|(f, a)| a * (2.0 * std::f64::consts::PI * f * t).sin())
                .sum::<f64>()
                * 0.3
        })
        .collect();
    let clip = WaveformClip::new(samples, sr);
    let cfg = FeatureConfig::default();
    let feats = compute_log_mel(&clip, &cfg)?;
    println!("{:.2} s of audio -> {} mel bins x {} frames", clip.duration_seconds(), feats.n_mels(), feats.frames());

    let centres = mel_center_frequencies(&cfg, sr);
    let mid = feats.frames() / 2;
    let mut bins: Vec<usize> = (0..feats.n_mels()).collect();
    bins.sort_by(|&a, &b| feats.get(b, mid).total_cmp(&feats.get(a, mid)));
    for &b in &bins[..3] {
        println!("strong bin {b:>2} (centre {:7.1} Hz): {:.2}", centres[b], feats.get(b, mid));
    }

    let norm = mean_normalize(&feats);
    let row_mean = norm.row(bins[0]).iter().sum::<f64>() / norm.frames() as f64;
    println!("after mean normalisation bin {} averages {row_mean:.1e}", bins[0]);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, draw) = spec_augment(&norm, &SpecAugmentConfig::default(), &mut rng);
    println!(
        "SpecAugment masked frames {}..{} and bins {}..{}",
        draw.time.0,
        draw.time.0 + draw.time.1,
        draw.freq.0,
        draw.freq.0 + draw.freq.1
    );
    Ok(())
}
