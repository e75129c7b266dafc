//! Verification scoring of a trial list: EER and minDCF for an untrained
//! encoder with cosine scoring, against the chance level of random scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relnet_speaker::audio::extract_features;
use relnet_speaker::backend::{CosineBackend, RelationNetConfig};
use relnet_speaker::encoder::EncoderConfig;
use relnet_speaker::evaluation::{
    all_pairs_trials, compute_eer, parse_trials, score_trials_cached, verification_report, DcfParams, EmbeddingCache,
};
use relnet_speaker::features::FeatureConfig;
use relnet_speaker::model::{BackendKind, SpeakerModel};
use relnet_speaker::synth::{generate_synthetic_corpus, SyntheticSpeakerSpec};

fn main() -> relnet_speaker::Result<()> {
    // Trial lists are `label enroll test`, one trial per line.
    let parsed = parse_trials("1 a_1 a_2\n0 a_1 b_1\n")?;
    println!("parsed {} trials; first is a target: {}", parsed.len(), parsed[0].label.is_target());

    let spec = SyntheticSpeakerSpec {
        n_speakers: 6,
        clips_per_speaker: 5,
        clip_seconds: 1.0,
        val_speakers: 1,
        ..Default::default()
    };
    let m = generate_synthetic_corpus(&spec, &std::env::temp_dir().join("relnet-verify-example"))?;
    let feats = extract_features(&m, &FeatureConfig::default())?;
    let model = SpeakerModel::new(EncoderConfig::tiny(), RelationNetConfig::default(), BackendKind::Cosine, 0)?;

    let trials = all_pairs_trials(&m);
    let mut cache = EmbeddingCache::new(|id: &str| {
        let i = m.find_clip(id).expect("trial clips come from the manifest");
        model.encoder.embed(&model.store, &feats[i])
    });
    let scored = score_trials_cached(&trials, &mut cache, &CosineBackend)?;
    println!("{} trials scored with {} encoder passes", scored.len(), cache.encoder_calls());

    let report = verification_report(&scored, DcfParams::default(), "cosine")?;
    println!(
        "untrained encoder: EER {:.1}% at {:.3}, minDCF {:.3} (p_target {})",
        100.0 * report.eer,
        report.eer_threshold,
        report.min_dcf,
        report.p_target
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let random: Vec<f64> = trials.iter().map(|_| rng.gen()).collect();
    let labels: Vec<_> = trials.iter().map(|t| t.label).collect();
    println!("random scores:     EER {:.1}%", 100.0 * compute_eer(&random, &labels)?.0);
    Ok(())
}
