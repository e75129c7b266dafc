//! Trains a small model on a synthetic corpus: a local stage of episodic
//! training, then fine-tuning with global speaker supervision.
//!
//! `cargo run --release --example train_local_global -- [vanilla|improved]`

use relnet_speaker::audio::extract_features;
use relnet_speaker::backend::RelationNetConfig;
use relnet_speaker::encoder::EncoderConfig;
use relnet_speaker::manifest::Split;
use relnet_speaker::model::{BackendKind, SpeakerModel};
use relnet_speaker::synth::{generate_synthetic_corpus, SyntheticSpeakerSpec};
use relnet_speaker::training::{ClipSet, Regime, Stage, TrainConfig, Trainer};
use relnet_speaker::features::FeatureConfig;

fn main() -> relnet_speaker::Result<()> {
    let regime: Regime = std::env::args().nth(1).as_deref().unwrap_or("improved").parse()?;
    let dir = std::env::temp_dir().join("relnet-train-example");
    let spec = SyntheticSpeakerSpec {
        n_speakers: 10,
        clips_per_speaker: 8,
        clip_seconds: 1.0,
        val_speakers: 3,
        ..Default::default()
    };
    let m = generate_synthetic_corpus(&spec, &dir)?;
    let fcfg = FeatureConfig::default();
    let load = |split| -> relnet_speaker::Result<ClipSet> {
        let s = m.subset(&[split]);
        let f = extract_features(&s, &fcfg)?;
        ClipSet::new(s, f)
    };
    let (train, val) = (load(Split::Train)?, load(Split::Val)?);

    let encoder = EncoderConfig {
        channels: 64,
        embedding_dim: 32,
        ..Default::default()
    };
    let model = SpeakerModel::new(encoder, RelationNetConfig::default(), BackendKind::RelationImproved, 0)?;
    let cfg = TrainConfig {
        n_way: 5,
        local_epochs: 8,
        global_epochs: 4,
        regime,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, cfg)?;
    trainer.run(&train, Some(&val), &mut |r| {
        let total = r.total.map_or("-".into(), |t| format!("{t:.3}"));
        println!(
            "{:<6} epoch {:>2}  loss {total:>6}  held-out EER {:5.1}%",
            r.stage.to_string(),
            r.epoch,
            100.0 * r.val_eer.unwrap_or(f64::NAN)
        );
        Ok(())
    })?;
    let global_steps = trainer.steps.iter().filter(|s| s.stage == Stage::Global).count();
    println!("{} updates, {global_steps} with global supervision", trainer.updates);
    Ok(())
}
