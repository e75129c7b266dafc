//! Fixtures and oracles shared by the integration tests and the acceptance
//! suite.
#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relnet_speaker::audio::extract_features;
use relnet_speaker::autograd::{Graph, Var};
use relnet_speaker::backend::{GlobalPrototypeBank, RelationInput, RelationNet, RelationNetConfig};
use relnet_speaker::encoder::{Encoder, EncoderConfig, LayerShape, Mode, SpeakerEmbedding};
use relnet_speaker::episodic::{Episode, EpisodeClass};
use relnet_speaker::features::{FeatureConfig, LogMelFeatures};
use relnet_speaker::manifest::{DatasetManifest, Split};
use relnet_speaker::model::{BackendKind, SpeakerModel};
use relnet_speaker::params::ParamStore;
use relnet_speaker::synth::{generate_synthetic_corpus, SyntheticSpeakerSpec};
use relnet_speaker::tensor::Tensor;
use relnet_speaker::training::{episode_loss, ClipSet, DropoutStreams, Regime, TrainConfig, Trainer};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

pub fn random_features(n_mels: usize, frames: usize, rng: &mut impl Rng) -> LogMelFeatures {
    LogMelFeatures::new(random_tensor(&[n_mels, frames], rng))
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: String,
    pub scalars: usize,
}

/// Denominator floor for relative errors: gradients smaller than this are
/// compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Compares the backward pass of `loss` with central differences on every
/// trainable scalar in `store`.
pub fn check_gradients(store: &mut ParamStore, loss: &dyn Fn(&ParamStore) -> (Graph, Var), h: f64) -> GradCheck {
    let (g, l) = loss(store);
    store.zero_grad();
    g.backward(l, store);
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: String::new(),
        scalars: 0,
    };
    let eval = |store: &ParamStore| {
        let (g, l) = loss(store);
        g.value(l).item()
    };
    for id in ids {
        let analytic = store.grad(id).clone();
        for i in 0..analytic.len() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(store);
            store.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            out.scalars += 1;
            if rel > out.max_rel_err {
                out.max_rel_err = rel;
                out.worst = format!("{}[{i}]: analytic {a:e}, numeric {numeric:e}", store.get(id).name);
            }
        }
    }
    out
}

/// A small synthetic corpus written under `dir`, with features.
pub fn synthetic_sets(
    dir: &Path,
    spec: &SyntheticSpeakerSpec,
    features: &FeatureConfig,
) -> (DatasetManifest, ClipSet, ClipSet) {
    let m = generate_synthetic_corpus(spec, dir).expect("corpus");
    let train = m.subset(&[Split::Train]);
    let val = m.subset(&[Split::Val]);
    let tf = extract_features(&train, features).expect("train features");
    let vf = extract_features(&val, features).expect("val features");
    (
        m,
        ClipSet::new(train, tf).expect("train set"),
        ClipSet::new(val, vf).expect("val set"),
    )
}

/// A spec small enough for unit-scale training runs.
pub fn small_spec(seed: u64) -> SyntheticSpeakerSpec {
    SyntheticSpeakerSpec {
        n_speakers: 8,
        clips_per_speaker: 6,
        clip_seconds: 0.6,
        val_speakers: 3,
        seed,
        ..Default::default()
    }
}

/// Quadratic-time EER: miss and false-alarm rates counted afresh at every
/// candidate threshold (each distinct score, then `+inf`), crossing located
/// by linear interpolation between neighbouring thresholds.
pub fn brute_force_eer(tar: &[f64], non: &[f64]) -> f64 {
    let mut cands: Vec<f64> = tar.iter().chain(non).copied().collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    cands.push(f64::INFINITY);
    let rates = |t: f64| {
        let miss = tar.iter().filter(|&&s| s < t).count() as f64 / tar.len() as f64;
        let fa = non.iter().filter(|&&s| s >= t).count() as f64 / non.len() as f64;
        (miss, fa)
    };
    let mut prev: Option<(f64, f64)> = None;
    for t in cands {
        let (m, f) = rates(t);
        if m >= f {
            return match prev {
                Some((m0, f0)) if m != f => {
                    let a = (f0 - m0) / ((f0 - m0) - (f - m));
                    m0 + a * (m - m0)
                }
                _ => m.max(f),
            };
        }
        prev = Some((m, f));
    }
    unreachable!("every target is missed at +inf")
}

/// Quadratic-time normalised minDCF, evaluating thresholds below the lowest
/// score, at every midpoint between adjacent distinct scores and above the
/// highest.
pub fn brute_force_min_dcf(tar: &[f64], non: &[f64], p_target: f64, c_miss: f64, c_fa: f64) -> f64 {
    let mut s: Vec<f64> = tar.iter().chain(non).copied().collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut cands = vec![s[0] - 1.0];
    cands.extend(s.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cands.push(s[s.len() - 1] + 1.0);
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    cands
        .into_iter()
        .map(|t| {
            let miss = tar.iter().filter(|&&x| x < t).count() as f64 / tar.len() as f64;
            let fa = non.iter().filter(|&&x| x >= t).count() as f64 / non.len() as f64;
            (c_miss * miss * p_target + c_fa * fa * (1.0 - p_target)) / norm
        })
        .fold(f64::INFINITY, f64::min)
}

/// A random score set with at least one target and one nontarget; scores
/// are sometimes quantised so that ties occur.
pub fn random_score_set(rng: &mut impl Rng, max_len: usize) -> (Vec<f64>, Vec<relnet_speaker::evaluation::TrialLabel>) {
    use relnet_speaker::evaluation::TrialLabel;
    let n = rng.gen_range(2..=max_len);
    let quantise = rng.gen_bool(0.4);
    let shift = rng.gen_range(0.0..2.0);
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let target = match i {
            0 => true,
            1 => false,
            _ => rng.gen_bool(0.3),
        };
        let mut s: f64 = rng.gen_range(-1.0..1.0) + if target { shift } else { 0.0 };
        if quantise {
            s = (s * 4.0).round() / 4.0;
        }
        scores.push(s);
        labels.push(if target { TrialLabel::Target } else { TrialLabel::Nontarget });
    }
    (scores, labels)
}

pub fn split_by_label(scores: &[f64], labels: &[relnet_speaker::evaluation::TrialLabel]) -> (Vec<f64>, Vec<f64>) {
    let tar = scores.iter().zip(labels).filter(|(_, l)| l.is_target()).map(|(s, _)| *s).collect();
    let non = scores.iter().zip(labels).filter(|(_, l)| !l.is_target()).map(|(s, _)| *s).collect();
    (tar, non)
}

/// Support/query positions of combination `l` written out term by term from
/// the cyclic index definition.
pub fn combination_by_definition(t: usize, k: usize, l: usize) -> (Vec<usize>, Vec<usize>) {
    let h = |z: usize| {
        let mut p = z;
        while p > t {
            p -= t;
        }
        p
    };
    let support = (0..k).map(|i| h(l + i)).collect();
    let query = (k..t).map(|i| h(l + i)).collect();
    (support, query)
}

/// Output length of a convolution, written out from first principles.
pub fn conv_out(t: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> usize {
    (t + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1
}

pub type ShapeRow = (String, (usize, usize), (usize, usize));

/// Symbolic propagation of the layer table: `(name, input, output)`.
pub fn shape_oracle(cfg: &EncoderConfig, t: usize) -> Vec<ShapeRow> {
    let c = cfg.channels;
    let t1 = conv_out(t, cfg.conv1_kernel, cfg.conv1_stride, 1, cfg.conv1_kernel / 2);
    let mut rows = vec![("conv1".to_string(), (cfg.n_mels, t), (c, t1))];
    let mut tt = t1;
    for (i, &d) in cfg.dilations.iter().enumerate() {
        let o = conv_out(tt, cfg.block_kernel, 1, d, d * (cfg.block_kernel / 2));
        rows.push((format!("block{}", i + 1), (c, tt), (c, o)));
        tt = o;
    }
    let c5 = cfg.conv5_channels.unwrap_or(3 * c / 2);
    let t5 = conv_out(tt, 1, cfg.conv5_stride, 1, 0);
    rows.push(("conv5".into(), (3 * c, tt), (c5, t5)));
    rows.push(("pool".into(), (c5, t5), (2 * c5, 1)));
    rows.push(("fc".into(), (2 * c5, 1), (cfg.embedding_dim, 1)));
    rows
}

pub fn as_tuples(trace: &[LayerShape]) -> Vec<ShapeRow> {
    trace.iter().map(|r| (r.name.clone(), r.input, r.output)).collect()
}

/// Full-size layer table for a 200-frame input: channel columns as
/// published, time being the post-stride length throughout.
pub fn full_size_table() -> Vec<ShapeRow> {
    let t1 = 100;
    [
        ("conv1", (80, 200), (1024, t1)),
        ("block1", (1024, t1), (1024, t1)),
        ("block2", (1024, t1), (1024, t1)),
        ("block3", (1024, t1), (1024, t1)),
        ("conv5", (3072, t1), (1536, t1)),
        ("pool", (1536, t1), (3072, 1)),
        ("fc", (3072, 1), (192, 1)),
    ]
    .into_iter()
    .map(|(n, i, o)| (n.to_string(), i, o))
    .collect()
}

/// Gradient check of the tiny encoder under a random linear readout.
pub fn tiny_encoder_grad_check() -> GradCheck {
    let cfg = EncoderConfig::tiny();
    let mut store = ParamStore::new();
    let mut r = rng(21);
    let enc = Encoder::new(cfg, &mut store, &mut r).unwrap();
    let clips: Vec<_> = (0..3).map(|_| random_features(80, 20, &mut r)).collect();
    let proj = random_tensor(&[3, 8], &mut r);
    let loss = |store: &ParamStore| {
        let mut g = Graph::new();
        let refs: Vec<_> = clips.iter().collect();
        let e = enc.forward(&mut g, store, &refs, Mode::Train).unwrap();
        let p = g.constant(proj.clone());
        let m = g.mul(e, p);
        let s = g.sum(m);
        (g, s)
    };
    check_gradients(&mut store, &loss, 1e-5)
}

/// Gradient check of a tiny improved relation net scoring queries against
/// a learnable prototype bank, under a squared-error loss.
pub fn tiny_relation_grad_check() -> GradCheck {
    let m = 4;
    let cfg = RelationNetConfig {
        hidden_dims: vec![8],
        ..Default::default()
    };
    let mut r = rng(6);
    let mut store = ParamStore::new();
    let net = RelationNet::new(&mut store, "rel", RelationInput::Improved, m, cfg, &mut r).unwrap();
    let protos: Vec<_> = (0..3)
        .map(|_| SpeakerEmbedding::new((0..m).map(|_| r.gen_range(-2.0..2.0)).collect()))
        .collect();
    let bank = GlobalPrototypeBank::new(&mut store, &protos).unwrap();
    let queries = random_tensor(&[5, m], &mut r);
    let targets = Tensor::from_vec(&[5, 3], (0..15).map(|i| (i % 4 == 0) as u8 as f64).collect());
    let loss = |store: &ParamStore| {
        let mut g = Graph::new();
        let q = g.constant(queries.clone());
        let w = g.param(store, bank.param);
        let s = net.score_matrix(&mut g, store, q, w, Mode::Train, None);
        let t = g.constant(targets.clone());
        let d = g.sub(s, t);
        let sq = g.square(d);
        let l = g.sum(sq);
        (g, l)
    };
    check_gradients(&mut store, &loss, 1e-6)
}

/// A 3-way episode over positions only; clip ids are irrelevant to the loss.
pub fn toy_episode(k: usize, q: usize) -> Episode {
    Episode {
        classes: (0..3)
            .map(|c| EpisodeClass {
                global_label: [2, 4, 1][c],
                clips: (0..k + q).map(|i| c * 10 + i).collect(),
            })
            .collect(),
        k,
        q,
    }
}

/// Tiny encoder, one-hidden-layer improved relation net and a bank of four
/// random prototypes.
pub fn tiny_model(seed: u64) -> SpeakerModel {
    let rel = RelationNetConfig {
        hidden_dims: vec![8],
        ..Default::default()
    };
    let mut model = SpeakerModel::new(EncoderConfig::tiny(), rel, BackendKind::RelationImproved, seed).unwrap();
    let mut r = rng(seed + 100);
    let protos: Vec<_> = (0..4)
        .map(|_| SpeakerEmbedding::new((0..8).map(|_| r.gen_range(-1.0..1.0)).collect()))
        .collect();
    model.bank = Some(GlobalPrototypeBank::new(&mut model.store, &protos).unwrap());
    model
}

pub fn with_store(model: &SpeakerModel, store: &ParamStore) -> SpeakerModel {
    SpeakerModel {
        backend: model.backend,
        store: store.clone(),
        encoder: model.encoder.clone(),
        relation: model.relation.clone(),
        bank: model.bank.clone(),
    }
}

/// Nine random clips forming the 3-way, k = 1, q = 2 toy episode.
pub fn toy_episode_features() -> Vec<LogMelFeatures> {
    let mut r = rng(5);
    (0..9).map(|_| random_features(80, 20, &mut r)).collect()
}

pub const TOY_LAMBDA: f64 = 0.7;

/// Total cyclic-regime loss with global supervision for the toy episode.
pub fn toy_improved_loss(model: &SpeakerModel, feats: &[LogMelFeatures]) -> (Graph, Var) {
    let refs: Vec<_> = feats.iter().collect();
    let mut g = Graph::new();
    let emb = model.encoder.forward(&mut g, &model.store, &refs, Mode::Train).unwrap();
    let (total, _, _) = episode_loss(
        &mut g,
        model,
        emb,
        &toy_episode(1, 2),
        Regime::Improved,
        Some(TOY_LAMBDA),
        10.0,
        Mode::Train,
        &mut DropoutStreams::none(),
    )
    .unwrap();
    (g, total)
}

/// Gradient check of the aggregated cyclic-regime loss over every encoder,
/// relation and prototype parameter. A step of 1e-5 straddles ReLU kinks in
/// conv1 for this fixture, hence 1e-6.
pub fn aggregated_loss_grad_check() -> GradCheck {
    let mut model = tiny_model(4);
    let feats = toy_episode_features();
    let base = with_store(&model, &model.store);
    let loss = |store: &ParamStore| toy_improved_loss(&with_store(&base, store), &feats);
    check_gradients(&mut model.store, &loss, 1e-6)
}

/// A tiny-encoder trainer on [`small_spec`] data: 4-way episodes, three per
/// epoch, 30-frame crops.
pub fn small_trainer(regime: Regime, dir: &Path) -> (Trainer, ClipSet) {
    let (_, train, _) = synthetic_sets(dir, &small_spec(1), &FeatureConfig::default());
    let cfg = TrainConfig {
        n_way: 4,
        episodes_per_epoch: 3,
        crop_frames: 30,
        regime,
        ..Default::default()
    };
    let model = SpeakerModel::new(EncoderConfig::tiny(), RelationNetConfig::default(), BackendKind::RelationImproved, 2).unwrap();
    (Trainer::new(model, cfg).unwrap(), train)
}

/// Parameter names whose values differ between two stores, ignoring the
/// prototype bank.
pub fn differing_params(a: &SpeakerModel, b: &SpeakerModel) -> Vec<String> {
    let skip = b.bank.as_ref().map(|bk| bk.param);
    b.store
        .iter()
        .filter(|(id, _)| Some(*id) != skip)
        .filter(|(_, p)| {
            let q = a.store.find(&p.name).unwrap();
            p.value.data() != a.store.value(q).data()
        })
        .map(|(_, p)| p.name.clone())
        .collect()
}
