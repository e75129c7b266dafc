//! Saves a trainer mid-run, restores it and checks that the resumed run
//! continues exactly where the uninterrupted one would be.

use relnet_speaker::audio::extract_features;
use relnet_speaker::backend::RelationNetConfig;
use relnet_speaker::checkpoint::{load_model, load_trainer, save_checkpoint};
use relnet_speaker::config::RunConfig;
use relnet_speaker::encoder::EncoderConfig;
use relnet_speaker::features::FeatureConfig;
use relnet_speaker::manifest::Split;
use relnet_speaker::model::{BackendKind, SpeakerModel};
use relnet_speaker::synth::{generate_synthetic_corpus, SyntheticSpeakerSpec};
use relnet_speaker::training::{ClipSet, Stage, TrainConfig, Trainer};

fn main() -> relnet_speaker::Result<()> {
    let dir = std::env::temp_dir().join("relnet-checkpoint-example");
    let spec = SyntheticSpeakerSpec {
        n_speakers: 6,
        clips_per_speaker: 4,
        clip_seconds: 0.6,
        val_speakers: 1,
        ..Default::default()
    };
    let m = generate_synthetic_corpus(&spec, &dir.join("corpus"))?.subset(&[Split::Train]);
    let train = ClipSet::new(m.clone(), extract_features(&m, &FeatureConfig::default())?)?;

    let cfg = RunConfig {
        encoder: EncoderConfig::tiny(),
        train: TrainConfig {
            n_way: 3,
            episodes_per_epoch: 2,
            crop_frames: 30,
            ..Default::default()
        },
        ..Default::default()
    };
    let fresh = || -> relnet_speaker::Result<Trainer> {
        let model = SpeakerModel::new(cfg.encoder.clone(), RelationNetConfig::default(), BackendKind::RelationImproved, 0)?;
        Trainer::new(model, cfg.train.clone())
    };

    let mut straight = fresh()?;
    let mut interrupted = fresh()?;
    for _ in 0..2 {
        straight.train_epoch(Stage::Local, &train, None)?;
        interrupted.train_epoch(Stage::Local, &train, None)?;
    }
    let ckpt = dir.join("checkpoint");
    save_checkpoint(&ckpt, &cfg, &interrupted)?;
    drop(interrupted);

    let (_, mut resumed) = load_trainer(&ckpt)?;
    println!("restored after epoch {} with {} updates", resumed.epoch, resumed.updates);
    let a = straight.train_epoch(Stage::Global, &train, None)?;
    let b = resumed.train_epoch(Stage::Global, &train, None)?;
    println!("next epoch loss: uninterrupted {:?}, resumed {:?}", a.total, b.total);
    assert_eq!(a.total, b.total);

    let (saved_cfg, model) = load_model(&ckpt)?;
    println!(
        "inference model: {} backend, {}-d embeddings, {} encoder channels",
        model.backend,
        model.embedding_dim(),
        saved_cfg.encoder.channels
    );
    Ok(())
}
