//! Scoring query embeddings against support prototypes with the vanilla and
//! improved relation networks, next to cosine and prototypical posteriors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relnet_speaker::backend::{
    aggregate_support, cosine_similarity, prototypical_posterior, relation_input, RelationInput, RelationNet,
    RelationNetConfig,
};
use relnet_speaker::encoder::SpeakerEmbedding;
use relnet_speaker::params::ParamStore;

fn main() -> relnet_speaker::Result<()> {
    let m = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let centres: Vec<Vec<f64>> = (0..3).map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let near = |c: &[f64], rng: &mut ChaCha8Rng| {
        SpeakerEmbedding::new(c.iter().map(|v| v + rng.gen_range(-0.2..0.2)).collect())
    };

    // Two support clips per speaker, averaged into one prototype each.
    let prototypes: Vec<SpeakerEmbedding> = centres
        .iter()
        .map(|c| aggregate_support(&[near(c, &mut rng), near(c, &mut rng)]))
        .collect::<Result<_, _>>()?;
    let query = near(&centres[1], &mut rng);

    let pair = relation_input(&query, &prototypes[1], RelationInput::Improved)?;
    println!("improved relation input has {} values (3 x {m})", pair.len());

    let mut store = ParamStore::new();
    let cfg = RelationNetConfig::default();
    let vanilla = RelationNet::new(&mut store, "vanilla", RelationInput::Vanilla, m, cfg.clone(), &mut rng)?;
    let improved = RelationNet::new(&mut store, "improved", RelationInput::Improved, m, cfg, &mut rng)?;

    let posterior = prototypical_posterior(&query, &prototypes)?;
    println!("speaker  cosine  posterior  vanilla  improved  (untrained nets)");
    for (c, p) in prototypes.iter().enumerate() {
        println!(
            "{:>7}  {:6.3}  {:9.3}  {:7.3}  {:8.3}",
            c + 1,
            cosine_similarity(&query, p)?,
            posterior[c],
            vanilla.relation(&store, &query, p)?.value(),
            improved.relation(&store, &query, p)?.value()
        );
    }
    Ok(())
}
