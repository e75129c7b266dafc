mod common;

use rand::Rng;

use relnet_speaker::autograd::Graph;
use relnet_speaker::backend::RelationNetConfig;
use relnet_speaker::encoder::{EncoderConfig, Mode};
use relnet_speaker::episodic::make_combinations;
use relnet_speaker::features::{FeatureConfig, LogMelFeatures};
use relnet_speaker::model::{BackendKind, SpeakerModel};
use relnet_speaker::params::ParamStore;
use relnet_speaker::tensor::Tensor;
use relnet_speaker::training::{
    combination_loss, episode_loss, global_loss, init_global_prototypes, local_loss, CombinationLayout,
    DropoutStreams, Regime, Stage,
};

use common::{
    random_features, rng, small_trainer, tiny_model, toy_episode, toy_episode_features, toy_improved_loss, TOY_LAMBDA,
};

fn squared_error_loop(scores: &Tensor, labels: &[usize]) -> f64 {
    let (rows, cols) = (scores.dim(0), scores.dim(1));
    let mut total = 0.0;
    for j in 0..rows {
        for c in 0..cols {
            let target = if labels[j] == c + 1 { 1.0 } else { 0.0 };
            let d = scores.data()[j * cols + c] - target;
            total += d * d;
        }
    }
    total
}

fn unit_scores(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen::<f64>()).collect())
}

#[test]
fn local_loss_matches_double_loop() {
    let mut r = rng(1);
    for _ in 0..50 {
        let s = unit_scores(&[4, 5], &mut r);
        let labels: Vec<usize> = (0..4).map(|_| r.gen_range(1..=5)).collect();
        assert!((local_loss(&s, &labels).unwrap() - squared_error_loop(&s, &labels)).abs() < 1e-7);
    }
}

#[test]
fn global_loss_matches_loops() {
    let mut r = rng(2);
    for _ in 0..50 {
        let q = unit_scores(&[3, 7], &mut r);
        let s = unit_scores(&[2, 7], &mut r);
        let ql: Vec<usize> = (0..3).map(|_| r.gen_range(1..=7)).collect();
        let sl: Vec<usize> = (0..2).map(|_| r.gen_range(1..=7)).collect();
        let expected = squared_error_loop(&q, &ql) + squared_error_loop(&s, &sl);
        assert!((global_loss(&q, &ql, &s, &sl).unwrap() - expected).abs() < 1e-7);
    }
}

#[test]
fn prototypes_are_mean_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let spec = relnet_speaker::synth::SyntheticSpeakerSpec {
        n_speakers: 7,
        clips_per_speaker: 3,
        clip_seconds: 0.5,
        val_speakers: 2,
        ..Default::default()
    };
    let (_, train, _) = common::synthetic_sets(dir.path(), &spec, &FeatureConfig::default());
    assert_eq!(train.manifest.num_speakers(), 5);
    let mut model =
        SpeakerModel::new(EncoderConfig::tiny(), RelationNetConfig::default(), BackendKind::RelationImproved, 3).unwrap();
    let bank = init_global_prototypes(&mut model, &train).unwrap();
    assert_eq!(bank.len(&model.store), 5);
    for s in 0..5 {
        let mut acc = vec![0.0; 8];
        let mut n = 0;
        for (i, e) in train.manifest.entries().iter().enumerate() {
            if train.manifest.speaker_index(&e.speaker) == Some(s + 1) {
                let emb = model.encoder.embed(&model.store, &train.features[i]).unwrap();
                acc.iter_mut().zip(&emb.values).for_each(|(a, v)| *a += v);
                n += 1;
            }
        }
        let p = bank.prototype(&model.store, s + 1);
        for (a, b) in acc.iter().zip(&p.values) {
            assert!((a / n as f64 - b).abs() < 1e-6);
        }
    }
    assert!(model.store.get(bank.param).trainable);
}

fn grads(store: &ParamStore) -> Vec<f64> {
    store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(_, p)| p.grad.data().to_vec())
        .collect()
}

#[test]
fn aggregated_gradient_is_sum_of_combination_gradients() {
    let mut model = tiny_model(4);
    let episode = toy_episode(1, 2);
    let feats = toy_episode_features();
    let refs: Vec<_> = feats.iter().collect();
    let lambda = TOY_LAMBDA;

    let mut g = Graph::new();
    let emb = model.encoder.forward(&mut g, &model.store, &refs, Mode::Train).unwrap();
    let (total, _, _) = episode_loss(
        &mut g,
        &model,
        emb,
        &episode,
        Regime::Improved,
        Some(lambda),
        10.0,
        Mode::Train,
        &mut DropoutStreams::none(),
    )
    .unwrap();
    model.store.zero_grad();
    g.backward(total, &mut model.store);
    let aggregated = grads(&model.store);

    let mut summed = vec![0.0; aggregated.len()];
    for combo in make_combinations(3, 1).unwrap() {
        let layout = CombinationLayout::new(&episode, &combo);
        let mut g = Graph::new();
        let emb = model.encoder.forward(&mut g, &model.store, &refs, Mode::Train).unwrap();
        let (l, gl) =
            combination_loss(&mut g, &model, emb, &layout, true, 10.0, Mode::Train, &mut DropoutStreams::none()).unwrap();
        let w = g.scale(gl.unwrap(), lambda);
        let t = g.add(l, w);
        model.store.zero_grad();
        g.backward(t, &mut model.store);
        summed.iter_mut().zip(grads(&model.store)).for_each(|(s, v)| *s += v);
    }
    let scale = aggregated.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, s) in aggregated.iter().zip(&summed) {
        assert!((a - s).abs() <= 1e-9 * scale.max(1.0));
    }

    let (g, t) = toy_improved_loss(&model, &feats);
    assert_eq!(g.value(t).item(), g.value(total).item());
    let report = common::aggregated_loss_grad_check();
    assert!(report.max_rel_err <= 1e-3, "{report:?}");
}

#[test]
fn identical_combinations_scale_vanilla_loss() {
    let model = tiny_model(6);
    let episode = toy_episode(1, 3);
    let mut r = rng(7);
    let per_class: Vec<LogMelFeatures> = (0..3).map(|_| random_features(80, 20, &mut r)).collect();
    let feats: Vec<&LogMelFeatures> = (0..12).map(|i| &per_class[i / 4]).collect();
    let run = |regime| {
        let mut g = Graph::new();
        let emb = model.encoder.forward(&mut g, &model.store, &feats, Mode::Train).unwrap();
        let (t, _, _) = episode_loss(&mut g, &model, emb, &episode, regime, Some(1.0), 10.0, Mode::Train, &mut DropoutStreams::none())
            .unwrap();
        g.value(t).item()
    };
    let (v, i) = (run(Regime::Vanilla), run(Regime::Improved));
    assert!((i - 4.0 * v).abs() < 1e-9 * i.abs().max(1.0), "{i} vs 4 x {v}");
}

#[test]
fn one_update_per_episode_in_both_regimes() {
    let dir = tempfile::tempdir().unwrap();
    for regime in [Regime::Vanilla, Regime::Improved] {
        let (mut t, train) = small_trainer(regime, dir.path());
        t.train_epoch(Stage::Local, &train, None).unwrap();
        assert_eq!(t.updates, 3);
        t.train_epoch(Stage::Global, &train, None).unwrap();
        assert_eq!(t.updates, 6);
        assert_eq!(t.steps.len(), 6);
        let bank = t.model.bank.as_ref().unwrap().param;
        let store = &t.model.store;
        assert_eq!(t.optimizer.state.len(), store.len());
        for ((id, p), state) in store.iter().zip(&t.optimizer.state) {
            let expected = if id == bank { 3 } else { 6 };
            match state {
                Some((_, _, steps)) => assert_eq!(*steps, expected, "{}", p.name),
                None => assert!(!p.trainable, "{}", p.name),
            }
        }
        for s in &t.steps {
            assert!((s.total - (s.local + s.lambda * s.global)).abs() <= 1e-6 * s.total.abs().max(1.0));
        }
    }
}

#[test]
fn zero_lambda_global_stage_equals_more_local_training() {
    let dir = tempfile::tempdir().unwrap();
    let (mut a, train) = small_trainer(Regime::Improved, dir.path());
    let (mut b, _) = small_trainer(Regime::Improved, dir.path());
    b.config.lambda = 0.0;
    for _ in 0..2 {
        a.train_epoch(Stage::Local, &train, None).unwrap();
        b.train_epoch(Stage::Local, &train, None).unwrap();
    }
    for _ in 0..2 {
        a.train_epoch(Stage::Local, &train, None).unwrap();
        b.train_epoch(Stage::Global, &train, None).unwrap();
    }
    assert_eq!(common::differing_params(&a.model, &b.model), Vec::<String>::new());
    let la: Vec<f64> = a.steps.iter().map(|s| s.local).collect();
    let lb: Vec<f64> = b.steps.iter().map(|s| s.local).collect();
    assert_eq!(la, lb);
}

#[test]
fn training_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (mut a, train) = small_trainer(Regime::Improved, dir.path());
    let (mut b, _) = small_trainer(Regime::Improved, dir.path());
    a.train_epoch(Stage::Local, &train, None).unwrap();
    b.train_epoch(Stage::Local, &train, None).unwrap();
    assert_eq!(a.steps, b.steps);
}

#[test]
fn trained_cosine_baseline_separates_speakers() {
    let dir = tempfile::tempdir().unwrap();
    let spec = relnet_speaker::synth::SyntheticSpeakerSpec {
        n_speakers: 10,
        clips_per_speaker: 8,
        clip_seconds: 1.0,
        val_speakers: 3,
        seed: 2,
        ..Default::default()
    };
    let (_, train, val) = common::synthetic_sets(dir.path(), &spec, &FeatureConfig::default());
    let encoder = EncoderConfig {
        channels: 32,
        embedding_dim: 16,
        ..Default::default()
    };
    let model = SpeakerModel::new(encoder, RelationNetConfig::default(), BackendKind::Proto, 1).unwrap();
    let cfg = relnet_speaker::training::TrainConfig {
        n_way: 5,
        local_epochs: 12,
        stage: Stage::Local,
        ..Default::default()
    };
    let mut t = relnet_speaker::training::Trainer::new(model, cfg).unwrap();
    let mut eers = Vec::new();
    t.run(&train, Some(&val), &mut |r| {
        eers.push(r.val_eer.unwrap());
        Ok(())
    })
    .unwrap();
    assert!(eers.last() < eers.first(), "{eers:?}");

    let emb = val.embeddings(&t.model).unwrap();
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            let c = relnet_speaker::backend::cosine_similarity(&emb[i], &emb[j]).unwrap();
            if val.manifest.label(i) == val.manifest.label(j) {
                same.push(c);
            } else {
                diff.push(c);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&same) > mean(&diff), "same {} vs different {}", mean(&same), mean(&diff));
}
