mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use relnet_speaker::episodic::{cyclic_index, make_combinations, sample_episode};
use relnet_speaker::manifest::{DatasetManifest, ManifestEntry, Split};

fn manifest(speakers: usize, clips: usize) -> DatasetManifest {
    let entries = (0..speakers)
        .flat_map(|s| {
            (0..clips).map(move |c| ManifestEntry {
                clip_id: format!("s{s}_c{c}"),
                path: format!("s{s}/c{c}.wav").into(),
                speaker: format!("s{s}"),
                split: Split::Train,
            })
        })
        .collect();
    DatasetManifest::new("/nonexistent", entries).unwrap()
}

#[test]
fn generator_equals_definition_for_small_t() {
    for t in 2..=6 {
        for k in 1..t {
            let combos = make_combinations(t, k).unwrap();
            assert_eq!(combos.len(), t);
            for (i, c) in combos.iter().enumerate() {
                assert_eq!(c.l, i + 1);
                assert_eq!((c.support.clone(), c.query.clone()), common::combination_by_definition(t, k, c.l));
            }
        }
    }
}

#[test]
fn hand_enumerated_cases() {
    let c = make_combinations(3, 1).unwrap();
    let got: Vec<_> = c.iter().map(|c| (c.support.clone(), c.query.clone())).collect();
    assert_eq!(
        got,
        vec![(vec![1], vec![2, 3]), (vec![2], vec![3, 1]), (vec![3], vec![1, 2])]
    );
    let c = make_combinations(2, 1).unwrap();
    let got: Vec<_> = c.iter().map(|c| (c.support.clone(), c.query.clone())).collect();
    assert_eq!(got, vec![(vec![1], vec![2]), (vec![2], vec![1])]);
    assert_eq!((1..=7).map(|z| cyclic_index(z, 3)).collect::<Vec<_>>(), [1, 2, 3, 1, 2, 3, 1]);
    assert!(make_combinations(3, 3).is_err());
}

proptest! {
    #[test]
    fn combinations_partition_and_cover(t in 2usize..16, k_frac in 0.0f64..1.0) {
        let k = 1 + ((t - 1) as f64 * k_frac) as usize % (t - 1);
        let combos = make_combinations(t, k).unwrap();
        prop_assert_eq!(combos.len(), t);
        let all: BTreeSet<usize> = (1..=t).collect();
        let mut in_support = vec![0; t + 1];
        let mut in_query = vec![0; t + 1];
        for c in &combos {
            let s: BTreeSet<_> = c.support.iter().copied().collect();
            let q: BTreeSet<_> = c.query.iter().copied().collect();
            prop_assert_eq!(s.len(), k);
            prop_assert_eq!(q.len(), t - k);
            prop_assert!(s.is_disjoint(&q));
            prop_assert_eq!(s.union(&q).copied().collect::<BTreeSet<_>>(), all.clone());
            c.support.iter().for_each(|&p| in_support[p] += 1);
            c.query.iter().for_each(|&p| in_query[p] += 1);
        }
        prop_assert_eq!(&combos[0].support, &(1..=k).collect::<Vec<_>>());
        for p in 1..=t {
            prop_assert_eq!(in_support[p], k);
            prop_assert_eq!(in_query[p], t - k);
        }
    }

    #[test]
    fn cyclic_index_wraps(z in 1usize..10_000, t in 1usize..50) {
        let p = cyclic_index(z, t);
        prop_assert!((1..=t).contains(&p));
        prop_assert_eq!(cyclic_index(z + t, t), p);
    }

    #[test]
    fn episodes_are_well_formed(seed in 0u64..500, n in 1usize..8, k in 1usize..3, q in 1usize..3) {
        let m = manifest(10, 5);
        let ep = sample_episode(&m, n, k, q, &mut common::rng(seed)).unwrap();
        prop_assert_eq!(ep.n_way(), n);
        let labels: BTreeSet<_> = ep.global_labels().into_iter().collect();
        prop_assert_eq!(labels.len(), n);
        for c in &ep.classes {
            prop_assert_eq!(c.clips.len(), k + q);
            let distinct: BTreeSet<_> = c.clips.iter().collect();
            prop_assert_eq!(distinct.len(), k + q);
            for &i in &c.clips {
                prop_assert_eq!(m.label(i), c.global_label);
            }
        }
    }
}

#[test]
fn full_size_episode_has_360_clips() {
    let m = manifest(130, 4);
    let ep = sample_episode(&m, 120, 1, 2, &mut common::rng(0)).unwrap();
    assert_eq!(ep.flat_clips().len(), 360);
}

#[test]
fn seeds_vary_class_sets() {
    let m = manifest(50, 3);
    let sets: Vec<BTreeSet<usize>> = (0..100)
        .map(|s| sample_episode(&m, 10, 1, 1, &mut common::rng(s)).unwrap().global_labels().into_iter().collect())
        .collect();
    let distinct: BTreeSet<_> = sets.iter().cloned().collect();
    assert!(distinct.len() >= 95, "only {} distinct class sets", distinct.len());
    let again = sample_episode(&m, 10, 1, 1, &mut common::rng(7)).unwrap();
    assert_eq!(again, sample_episode(&m, 10, 1, 1, &mut common::rng(7)).unwrap());
}
