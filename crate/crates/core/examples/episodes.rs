//! Samples a 4-way episode and lists the cyclic support/query combinations
//! it is trained on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use relnet_speaker::episodic::{make_combinations, sample_episode};
use relnet_speaker::manifest::{DatasetManifest, ManifestEntry, Split};

fn main() -> relnet_speaker::Result<()> {
    let entries = (0..8)
        .flat_map(|s| {
            (0..5).map(move |c| ManifestEntry {
                clip_id: format!("spk{s}_{c}"),
                path: format!("spk{s}/{c}.wav").into(),
                speaker: format!("spk{s}"),
                split: Split::Train,
            })
        })
        .collect();
    let m = DatasetManifest::new("corpus", entries)?;

    let (k, q) = (1, 2);
    let episode = sample_episode(&m, 4, k, q, &mut ChaCha8Rng::seed_from_u64(9))?;
    for (i, class) in episode.classes.iter().enumerate() {
        let clips: Vec<_> = class.clips.iter().map(|&c| m.entries()[c].clip_id.as_str()).collect();
        println!("local {} = speaker {} ({}): {clips:?}", i + 1, class.global_label, m.speakers()[class.global_label - 1]);
    }

    println!("\ncombinations over positions 1..={}:", k + q);
    for c in make_combinations(k + q, k)? {
        println!("  l = {}: support {:?}, query {:?}", c.l, c.support, c.query);
    }
    Ok(())
}
