//! Layer shapes of the full-size encoder and embeddings from a small one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use relnet_speaker::backend::cosine_similarity;
use relnet_speaker::encoder::{Encoder, EncoderConfig};
use relnet_speaker::features::{compute_log_mel, mean_normalize, FeatureConfig, WaveformClip};
use relnet_speaker::params::ParamStore;

fn vowel(f0: f64, seconds: f64) -> WaveformClip {
    let sr = 16_000;
    let n = (seconds * sr as f64) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr as f64;
            (1..6).map(|h| (2.0 * std::f64::consts::PI * f0 * h as f64 * t).sin() / h as f64).sum::<f64>() * 0.2
        })
        .collect();
    WaveformClip::new(samples, sr)
}

fn main() -> relnet_speaker::Result<()> {
    println!("full-size encoder on 200 frames:");
    for row in EncoderConfig::paper_scale().shape_trace(200)? {
        println!("  {:<7} {:>5} x {:<4} -> {:>5} x {}", row.name, row.input.0, row.input.1, row.output.0, row.output.1);
    }

    let cfg = EncoderConfig::default();
    let mut store = ParamStore::new();
    let encoder = Encoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1))?;
    let n: usize = store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.len()).sum();
    println!("desk-scale encoder: {n} parameters");

    let fcfg = FeatureConfig::default();
    let feats: Vec<_> = [110.0, 112.0, 200.0]
        .iter()
        .map(|&f0| compute_log_mel(&vowel(f0, 1.0), &fcfg).map(|f| mean_normalize(&f)))
        .collect::<Result<_, _>>()?;
    let emb = encoder.embed_many(&store, &feats.iter().collect::<Vec<_>>())?;
    println!("embedding dimension {}", emb[0].dim());
    println!("cos(110 Hz, 112 Hz) = {:.3}", cosine_similarity(&emb[0], &emb[1])?);
    println!("cos(110 Hz, 200 Hz) = {:.3}", cosine_similarity(&emb[0], &emb[2])?);
    Ok(())
}
