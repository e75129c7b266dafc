//! Generates a small synthetic speaker corpus and prints its layout.
//!
//! `cargo run --example synth_corpus -- [OUT_DIR]`

use std::path::PathBuf;

use relnet_speaker::manifest::Split;
use relnet_speaker::synth::{generate_synthetic_corpus, SyntheticSpeakerSpec};

fn main() -> relnet_speaker::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("relnet-synth-corpus"));

    let spec = SyntheticSpeakerSpec {
        n_speakers: 6,
        clips_per_speaker: 4,
        clip_seconds: 1.0,
        val_speakers: 2,
        seed: 3,
        ..Default::default()
    };
    let voices = spec.draw_voices()?;
    for v in &voices {
        println!(
            "{:>6}  f0 {:6.1} Hz  tract x{:.2}  tilt {:.2}",
            v.speaker, v.f0_hz, v.tract_scale, v.tilt
        );
    }
    let closest = voices
        .iter()
        .enumerate()
        .flat_map(|(i, a)| voices[i + 1..].iter().map(move |b| a.separation(b)))
        .fold(f64::INFINITY, f64::min);
    println!("closest pair of voices: {closest:.2} clip-variation units apart");

    let m = generate_synthetic_corpus(&spec, &dir)?;
    for split in [Split::Train, Split::Val] {
        let s = m.subset(&[split]);
        println!("{split}: {} speakers, {} clips", s.num_speakers(), s.len());
    }
    println!("manifest at {}", dir.join("manifest.tsv").display());
    Ok(())
}
