//! Losses, the Adam optimizer and the two-stage episodic trainer.
//!
//! Stage one trains the encoder and relation network on the local (episode)
//! loss. Stage two seeds a learnable prototype per training speaker with
//! that speaker's mean embedding and adds the global loss, weighted by
//! `lambda`. In the improved regime each episode contributes the losses of
//! all `T` cyclic support/query combinations, built on one shared set of
//! embeddings and applied as a single optimizer step.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backend::{cosine_matrix, GlobalPrototypeBank};
use crate::encoder::{apply_stat_updates, Mode, SpeakerEmbedding};
use crate::episodic::{make_combinations, sample_episode, Episode, SupportQueryCombination};
use crate::error::{Error, Result};
use crate::evaluation::{all_pairs_trials, compute_eer, score_trials};
use crate::features::{spec_augment, LogMelFeatures, SpecAugmentConfig};
use crate::manifest::DatasetManifest;
use crate::model::{stream_rng, BackendKind, SpeakerModel};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// One support/query assignment per episode.
    Vanilla,
    /// All `T` cyclic assignments per episode.
    Improved,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Local,
    Global,
}

macro_rules! str_enum {
    ($t:ty, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(Error::InvalidInput(format!("unknown value {other:?}"))),
                }
            }
        }
    };
}

str_enum!(Regime, Regime::Vanilla => "vanilla", Regime::Improved => "improved");
str_enum!(Stage, Stage::Local => "local", Stage::Global => "global");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_decay_per_epoch: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub n_way: usize,
    pub k: usize,
    pub q: usize,
    /// Weight of the global loss during the fine-tuning stage.
    pub lambda: f64,
    /// `local` runs the local stage only; `global` also fine-tunes.
    pub stage: Stage,
    pub local_epochs: usize,
    pub global_epochs: usize,
    pub episodes_per_epoch: usize,
    pub regime: Regime,
    /// Random training crop length in frames.
    pub crop_frames: usize,
    pub augment: bool,
    pub spec_augment: SpecAugmentConfig,
    /// Logit scale of the prototypical (cosine softmax) loss.
    pub proto_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_initial: 0.001,
            lr_decay_per_epoch: 0.97,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            weight_decay: 2e-5,
            grad_clip: 5.0,
            n_way: 10,
            k: 1,
            q: 2,
            lambda: 1.0,
            stage: Stage::Global,
            local_epochs: 60,
            global_epochs: 20,
            episodes_per_epoch: 8,
            regime: Regime::Improved,
            crop_frames: 100,
            augment: true,
            spec_augment: SpecAugmentConfig::default(),
            proto_scale: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_initial", self.lr_initial),
            ("lr_decay_per_epoch", self.lr_decay_per_epoch),
            ("adam_eps", self.adam_eps),
            ("proto_scale", self.proto_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.n_way == 0 || self.k == 0 || self.q == 0 || self.episodes_per_epoch == 0 {
            return Err(Error::Config("n_way, k, q and episodes_per_epoch must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch index.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr_initial * self.lr_decay_per_epoch.powi(epoch as i32)
    }

    /// Global-loss weight in effect during `stage`.
    pub fn lambda_for(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Local => 0.0,
            Stage::Global => self.lambda,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub local: f64,
    pub global: f64,
    pub total: f64,
}

fn check_labels(labels: &[usize], max: usize) -> Result<()> {
    match labels.iter().find(|&&l| l == 0 || l > max) {
        Some(&label) => Err(Error::LabelOutOfRange { label, max }),
        None => Ok(()),
    }
}

fn squared_error_sum(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    if scores.rank() != 2 || scores.dim(0) != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for a score matrix of shape {:?}",
            labels.len(),
            scores.shape()
        )));
    }
    let n = scores.dim(1);
    check_labels(labels, n)?;
    Ok(labels
        .iter()
        .enumerate()
        .flat_map(|(j, &y)| {
            scores.row(j).iter().enumerate().map(move |(c, &r)| {
                let t = if c + 1 == y { 1.0 } else { 0.0 };
                (r - t) * (r - t)
            })
        })
        .sum())
}

/// Squared error between a `[Q, N]` score matrix and one-hot local labels
/// (`1..=N`), summed over every entry.
pub fn local_loss(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    squared_error_sum(scores, labels)
}

/// Squared error of the query and support scores against all `N'` global
/// prototypes. Both blocks are required.
pub fn global_loss(
    query_scores: &Tensor,
    query_labels: &[usize],
    support_scores: &Tensor,
    support_labels: &[usize],
) -> Result<f64> {
    if support_labels.is_empty() || query_labels.is_empty() {
        return Err(Error::InvalidInput(
            "global loss needs both a query and a support block".into(),
        ));
    }
    if query_scores.rank() == 2 && support_scores.rank() == 2 && query_scores.dim(1) != support_scores.dim(1) {
        return Err(Error::Shape("query and support blocks score different class sets".into()));
    }
    Ok(squared_error_sum(query_scores, query_labels)? + squared_error_sum(support_scores, support_labels)?)
}

pub fn total_loss(local: f64, global: f64, lambda: f64) -> f64 {
    local + lambda * global
}

fn one_hot(labels: &[usize], n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), n]);
    for (j, &y) in labels.iter().enumerate() {
        t.data_mut()[j * n + y - 1] = 1.0;
    }
    t
}

/// Sum of squared errors against one-hot targets, on the tape.
pub fn squared_error_node(g: &mut Graph, scores: Var, labels: &[usize]) -> Result<Var> {
    let n = g.shape(scores)[1];
    check_labels(labels, n)?;
    let t = g.constant(one_hot(labels, n));
    let d = g.sub(scores, t);
    let sq = g.square(d);
    Ok(g.sum(sq))
}

/// Cross-entropy of a softmax over logits, summed over rows, on the tape.
pub fn cross_entropy_node(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let n = g.shape(logits)[1];
    check_labels(labels, n)?;
    let t = g.constant(one_hot(labels, n));
    let ls = g.log_softmax_last(logits);
    let picked = g.mul(ls, t);
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0))
}

/// Row indices and labels of one combination inside an episode whose
/// embeddings are stored class-major (`c * T + p`).
pub struct CombinationLayout {
    /// `[N, N*T]` matrix averaging each class's support rows.
    pub support_mean: Tensor,
    pub support_rows: Vec<usize>,
    pub query_rows: Vec<usize>,
    /// Local labels (`1..=N`) of the query rows.
    pub query_local: Vec<usize>,
    pub support_global: Vec<usize>,
    pub query_global: Vec<usize>,
}

impl CombinationLayout {
    pub fn new(episode: &Episode, combo: &SupportQueryCombination) -> Self {
        let n = episode.n_way();
        let t = episode.items_per_class();
        let k = combo.support.len() as f64;
        let mut support_mean = Tensor::zeros(&[n, n * t]);
        let mut layout = Self {
            support_mean: Tensor::zeros(&[0]),
            support_rows: Vec::new(),
            query_rows: Vec::new(),
            query_local: Vec::new(),
            support_global: Vec::new(),
            query_global: Vec::new(),
        };
        for (c, class) in episode.classes.iter().enumerate() {
            for &p in &combo.support {
                let row = c * t + p - 1;
                support_mean.data_mut()[c * n * t + row] = 1.0 / k;
                layout.support_rows.push(row);
                layout.support_global.push(class.global_label);
            }
            for &p in &combo.query {
                layout.query_rows.push(c * t + p - 1);
                layout.query_local.push(c + 1);
                layout.query_global.push(class.global_label);
            }
        }
        layout.support_mean = support_mean;
        layout
    }
}

/// Dropout streams for the two loss branches, kept apart so the local
/// branch draws the same masks whether or not the global branch runs.
pub struct DropoutStreams<'a> {
    pub local: Option<&'a mut dyn RngCore>,
    pub global: Option<&'a mut dyn RngCore>,
}

fn reborrow<'s>(r: &'s mut Option<&mut dyn RngCore>) -> Option<&'s mut dyn RngCore> {
    match r {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

impl DropoutStreams<'_> {
    pub fn none() -> Self {
        Self {
            local: None,
            global: None,
        }
    }
}

/// Loss nodes of one combination: the local loss and, when a bank is given,
/// the global loss.
pub fn combination_loss(
    g: &mut Graph,
    model: &SpeakerModel,
    embeddings: Var,
    layout: &CombinationLayout,
    with_global: bool,
    proto_scale: f64,
    mode: Mode,
    dropout: &mut DropoutStreams<'_>,
) -> Result<(Var, Option<Var>)> {
    let a = g.constant(layout.support_mean.clone());
    let prototypes = g.matmul(a, embeddings);
    let queries = g.gather_rows(embeddings, &layout.query_rows);
    let local = match &model.relation {
        Some(net) => {
            let s = net.score_matrix(g, &model.store, queries, prototypes, mode, reborrow(&mut dropout.local));
            squared_error_node(g, s, &layout.query_local)?
        }
        None => {
            let cos = cosine_matrix(g, queries, prototypes);
            let logits = g.scale(cos, proto_scale);
            cross_entropy_node(g, logits, &layout.query_local)?
        }
    };
    if !with_global {
        return Ok((local, None));
    }
    let (Some(net), Some(bank)) = (&model.relation, &model.bank) else {
        return Err(Error::Config(
            "the global loss needs a relation network and an initialised prototype bank".into(),
        ));
    };
    let w = g.param(&model.store, bank.param);
    let supports = g.gather_rows(embeddings, &layout.support_rows);
    let sq = net.score_matrix(g, &model.store, queries, w, mode, reborrow(&mut dropout.global));
    let ss = net.score_matrix(g, &model.store, supports, w, mode, reborrow(&mut dropout.global));
    let lq = squared_error_node(g, sq, &layout.query_global)?;
    let ls = squared_error_node(g, ss, &layout.support_global)?;
    Ok((local, Some(g.add(lq, ls))))
}

/// The episode loss graph: local and global sums over the regime's
/// combinations and the weighted total.
pub fn episode_loss(
    g: &mut Graph,
    model: &SpeakerModel,
    embeddings: Var,
    episode: &Episode,
    regime: Regime,
    lambda: Option<f64>,
    proto_scale: f64,
    mode: Mode,
    dropout: &mut DropoutStreams<'_>,
) -> Result<(Var, Var, Option<Var>)> {
    let combos = make_combinations(episode.items_per_class(), episode.k)?;
    let used = match regime {
        Regime::Vanilla => &combos[..1],
        Regime::Improved => &combos[..],
    };
    let mut locals = Vec::with_capacity(used.len());
    let mut globals = Vec::with_capacity(used.len());
    for combo in used {
        let layout = CombinationLayout::new(episode, combo);
        let (l, gl) = combination_loss(g, model, embeddings, &layout, lambda.is_some(), proto_scale, mode, dropout)?;
        locals.push(l);
        globals.extend(gl);
    }
    let local = sum_nodes(g, &locals);
    let Some(lambda) = lambda else {
        return Ok((local, local, None));
    };
    let global = sum_nodes(g, &globals);
    let weighted = g.scale(global, lambda);
    let total = g.add(local, weighted);
    Ok((total, local, Some(global)))
}

fn sum_nodes(g: &mut Graph, nodes: &[Var]) -> Var {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n);
    }
    acc
}

/// Adam with L2 weight decay added to the (clipped) gradient and per-tensor
/// bias correction.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    /// `(m, v, steps)` per parameter, created on first update.
    pub state: Vec<Option<(Tensor, Tensor, u64)>>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every trainable parameter from the gradients in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, cfg: &TrainConfig) {
        let scale = if cfg.grad_clip > 0.0 {
            let norm = store.grad_norm();
            if norm > cfg.grad_clip {
                cfg.grad_clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let (b1, b2) = cfg.adam_betas;
        let ids: Vec<_> = store.ids().collect();
        if self.state.len() < ids.len() {
            self.state.resize(ids.len(), None);
        }
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let (m, v, t) = self.state[id.0]
                .get_or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape()), 0));
            *t += 1;
            let c1 = 1.0 - b1.powi(*t as i32);
            let c2 = 1.0 - b2.powi(*t as i32);
            let value = p.value.data_mut();
            let grad = p.grad.data();
            for i in 0..value.len() {
                let gi = grad[i] * scale + cfg.weight_decay * value[i];
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                value[i] -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Clips with their features; features are aligned with manifest entries.
pub struct ClipSet {
    pub manifest: DatasetManifest,
    pub features: Vec<LogMelFeatures>,
}

impl ClipSet {
    pub fn new(manifest: DatasetManifest, features: Vec<LogMelFeatures>) -> Result<Self> {
        if manifest.len() != features.len() {
            return Err(Error::Shape(format!(
                "{} manifest entries but {} feature matrices",
                manifest.len(),
                features.len()
            )));
        }
        Ok(Self { manifest, features })
    }

    pub fn embeddings(&self, model: &SpeakerModel) -> Result<Vec<SpeakerEmbedding>> {
        model.embed_all(&self.features.iter().collect::<Vec<_>>())
    }
}

/// Seeds prototype `C` with the mean eval-mode embedding of speaker `C`'s
/// clips and installs the bank in the model.
pub fn init_global_prototypes(model: &mut SpeakerModel, train: &ClipSet) -> Result<GlobalPrototypeBank> {
    let emb = train.embeddings(model)?;
    let m = model.embedding_dim();
    let mut prototypes = Vec::with_capacity(train.manifest.num_speakers());
    for (s, clips) in train.manifest.clips_by_speaker().iter().enumerate() {
        if clips.is_empty() {
            return Err(Error::Insufficient(format!(
                "speaker {} has no clips",
                train.manifest.speakers()[s]
            )));
        }
        let mut acc = vec![0.0; m];
        for &i in clips {
            for (a, v) in acc.iter_mut().zip(&emb[i].values) {
                *a += v;
            }
        }
        let p = SpeakerEmbedding::new(acc.into_iter().map(|a| a / clips.len() as f64).collect());
        if p.l2_norm() == 0.0 {
            log::warn!("speaker {} has a zero mean embedding", train.manifest.speakers()[s]);
        }
        prototypes.push(p);
    }
    let bank = GlobalPrototypeBank::new(&mut model.store, &prototypes)?;
    model.bank = Some(bank.clone());
    Ok(bank)
}

const STREAM_EPISODE: u64 = 2;
const STREAM_DROPOUT_LOCAL: u64 = 3;
const STREAM_DROPOUT_GLOBAL: u64 = 4;

/// Episode features after random cropping and augmentation, class-major.
pub fn episode_features(episode: &Episode, clips: &ClipSet, cfg: &TrainConfig, rng: &mut impl Rng) -> Vec<LogMelFeatures> {
    let idx = episode.flat_clips();
    let shortest = idx.iter().map(|&i| clips.features[i].frames()).min().unwrap_or(0);
    let len = cfg.crop_frames.min(shortest);
    idx.iter()
        .map(|&i| {
            let f = &clips.features[i];
            let start = rng.gen_range(0..=f.frames() - len);
            let c = f.crop(start, len);
            if cfg.augment {
                spec_augment(&c, &cfg.spec_augment, rng).0
            } else {
                c
            }
        })
        .collect()
}

/// Per-step record kept for auditing the loss accounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub episode: usize,
    pub lambda: f64,
    pub local: f64,
    pub global: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    /// Completed epochs across both stages; 0 is the untrained model.
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub local: Option<f64>,
    pub global: Option<f64>,
    pub total: Option<f64>,
    pub val_eer: Option<f64>,
    /// Training time of the epoch, excluding validation.
    pub train_ms: u64,
    pub wall_ms: u64,
    pub updates: u64,
}

pub struct Trainer {
    pub model: SpeakerModel,
    pub config: TrainConfig,
    pub optimizer: Adam,
    /// Epochs completed so far (both stages).
    pub epoch: usize,
    pub local_epochs_done: usize,
    pub global_epochs_done: usize,
    /// Optimizer updates applied so far.
    pub updates: u64,
    pub steps: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(model: SpeakerModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            config,
            optimizer: Adam::new(),
            epoch: 0,
            local_epochs_done: 0,
            global_epochs_done: 0,
            updates: 0,
            steps: Vec::new(),
        })
    }

    /// One episode: forward, loss, backward and a single optimizer update.
    pub fn train_step(&mut self, episode: &Episode, features: &[LogMelFeatures], stage: Stage, episode_index: usize) -> Result<LossBreakdown> {
        let cfg = &self.config;
        let lambda = cfg.lambda_for(stage);
        let with_global = stage == Stage::Global;
        let mut dl = stream_rng(cfg.seed, &[STREAM_DROPOUT_LOCAL, self.epoch as u64, episode_index as u64]);
        let mut dg = stream_rng(cfg.seed, &[STREAM_DROPOUT_GLOBAL, self.epoch as u64, episode_index as u64]);
        let mut dropout = DropoutStreams {
            local: Some(&mut dl),
            global: Some(&mut dg),
        };
        let mut g = Graph::new();
        let refs: Vec<&LogMelFeatures> = features.iter().collect();
        let emb = self.model.encoder.forward(&mut g, &self.model.store, &refs, Mode::Train)?;
        let (total, local, global) = episode_loss(
            &mut g,
            &self.model,
            emb,
            episode,
            cfg.regime,
            with_global.then_some(lambda),
            cfg.proto_scale,
            Mode::Train,
            &mut dropout,
        )?;
        let breakdown = LossBreakdown {
            local: g.value(local).item(),
            global: global.map_or(0.0, |v| g.value(v).item()),
            total: g.value(total).item(),
        };
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                episode: episode_index,
                local: breakdown.local,
                global: breakdown.global,
            });
        }
        self.model.store.zero_grad();
        g.backward(total, &mut self.model.store);
        apply_stat_updates(&mut self.model.store, g.stat_updates(), self.model.encoder.config.bn_momentum);
        let lr = cfg.lr_at_epoch(self.epoch);
        self.optimizer.step(&mut self.model.store, lr, cfg);
        self.updates += 1;
        self.steps.push(StepRecord {
            stage,
            epoch: self.epoch + 1,
            episode: episode_index,
            lambda,
            local: breakdown.local,
            global: breakdown.global,
            total: breakdown.total,
        });
        Ok(breakdown)
    }

    /// One epoch of `stage`.
    pub fn train_epoch(&mut self, stage: Stage, train: &ClipSet, val: Option<&ClipSet>) -> Result<EpochRecord> {
        if stage == Stage::Global {
            if self.model.backend == BackendKind::Proto || self.model.backend == BackendKind::Cosine {
                return Err(Error::Config(format!(
                    "global fine-tuning needs a relation backend, not {}",
                    self.model.backend
                )));
            }
            if self.model.bank.is_none() {
                init_global_prototypes(&mut self.model, train)?;
            }
        }
        let started = Instant::now();
        let cfg = self.config.clone();
        let mut sum = LossBreakdown::default();
        for e in 0..cfg.episodes_per_epoch {
            let mut rng = stream_rng(cfg.seed, &[STREAM_EPISODE, self.epoch as u64, e as u64]);
            let episode = sample_episode(&train.manifest, cfg.n_way, cfg.k, cfg.q, &mut rng)?;
            let feats = episode_features(&episode, train, &cfg, &mut rng);
            let b = self.train_step(&episode, &feats, stage, e)?;
            sum.local += b.local;
            sum.global += b.global;
            sum.total += b.total;
        }
        let train_ms = started.elapsed().as_millis() as u64;
        let n = cfg.episodes_per_epoch as f64;
        let lr = cfg.lr_at_epoch(self.epoch);
        self.epoch += 1;
        match stage {
            Stage::Local => self.local_epochs_done += 1,
            Stage::Global => self.global_epochs_done += 1,
        }
        let val_eer = val.map(|v| validation_eer(&self.model, v)).transpose()?;
        Ok(EpochRecord {
            stage,
            epoch: self.epoch,
            lr,
            lambda: cfg.lambda_for(stage),
            local: Some(sum.local / n),
            global: Some(sum.global / n),
            total: Some(sum.total / n),
            val_eer,
            train_ms,
            wall_ms: started.elapsed().as_millis() as u64,
            updates: self.updates,
        })
    }

    /// Validation record of the current model without training.
    pub fn evaluate_record(&self, stage: Stage, val: Option<&ClipSet>) -> Result<EpochRecord> {
        let started = Instant::now();
        let val_eer = val.map(|v| validation_eer(&self.model, v)).transpose()?;
        Ok(EpochRecord {
            stage,
            epoch: self.epoch,
            lr: self.config.lr_at_epoch(self.epoch),
            lambda: self.config.lambda_for(stage),
            local: None,
            global: None,
            total: None,
            val_eer,
            train_ms: 0,
            wall_ms: started.elapsed().as_millis() as u64,
            updates: self.updates,
        })
    }

    /// Runs whatever remains of the configured schedule: the local stage,
    /// then the global stage when `config.stage` is `global`. Records go to
    /// `sink` as they are produced, starting with an epoch-0 record for a
    /// fresh model.
    pub fn run(&mut self, train: &ClipSet, val: Option<&ClipSet>, sink: &mut dyn FnMut(&EpochRecord) -> Result<()>) -> Result<()> {
        if self.epoch == 0 {
            sink(&self.evaluate_record(Stage::Local, val)?)?;
        }
        while self.local_epochs_done < self.config.local_epochs {
            let r = self.train_epoch(Stage::Local, train, val)?;
            sink(&r)?;
        }
        if self.config.stage == Stage::Global {
            while self.global_epochs_done < self.config.global_epochs {
                let r = self.train_epoch(Stage::Global, train, val)?;
                sink(&r)?;
            }
        }
        Ok(())
    }
}

/// EER over all clip pairs of a held-out set, scored with the model's own
/// backend on full-length clips.
pub fn validation_eer(model: &SpeakerModel, val: &ClipSet) -> Result<f64> {
    let emb = val.embeddings(model)?;
    let map = val
        .manifest
        .entries()
        .iter()
        .map(|e| e.clip_id.clone())
        .zip(emb)
        .collect();
    let trials = all_pairs_trials(&val.manifest);
    let scorer = model.default_scorer()?;
    let scored = score_trials(&trials, &map, scorer.as_ref())?;
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let labels: Vec<_> = scored.iter().map(|s| s.trial.label).collect();
    Ok(compute_eer(&scores, &labels)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_loss_examples() {
        let perfect = Tensor::from_vec(&[2, 3], vec![1., 0., 0., 0., 0., 1.]);
        assert_eq!(local_loss(&perfect, &[1, 3]).unwrap(), 0.0);
        let half = Tensor::full(&[2, 3], 0.5);
        assert_eq!(local_loss(&half, &[1, 2]).unwrap(), 1.5);
        assert!(matches!(
            local_loss(&half, &[1, 4]),
            Err(Error::LabelOutOfRange { label: 4, max: 3 })
        ));
        assert!(local_loss(&half, &[0, 1]).is_err());
    }

    #[test]
    fn global_loss_contract() {
        let q = Tensor::from_vec(&[1, 2], vec![0., 1.]);
        let s = Tensor::from_vec(&[1, 2], vec![1., 0.]);
        assert_eq!(global_loss(&q, &[2], &s, &[1]).unwrap(), 0.0);
        let empty = Tensor::zeros(&[0, 2]);
        assert!(global_loss(&q, &[2], &empty, &[]).is_err());
        assert!(global_loss(&q, &[3], &s, &[1]).is_err());
    }

    #[test]
    fn total_and_schedule() {
        assert_eq!(total_loss(0.7, 9.0, 0.0), 0.7);
        assert!((total_loss(0.2, 0.3, 1.0) - 0.5).abs() < 1e-15);
        let c = TrainConfig::default();
        assert!((c.lr_at_epoch(10) - 0.001 * 0.97f64.powi(10)).abs() < 1e-18);
        assert_eq!(c.lr_at_epoch(0), 0.001);
        assert_eq!(c.lambda_for(Stage::Local), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lambda: -1.0, ..Default::default() },
            TrainConfig { lr_initial: 0.0, ..Default::default() },
            TrainConfig { k: 0, ..Default::default() },
            TrainConfig { adam_betas: (1.0, 0.9), ..Default::default() },
            TrainConfig { grad_clip: -1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn layout_of_first_combination() {
        let ep = Episode {
            classes: vec![
                crate::episodic::EpisodeClass { global_label: 4, clips: vec![0, 1, 2] },
                crate::episodic::EpisodeClass { global_label: 2, clips: vec![3, 4, 5] },
            ],
            k: 1,
            q: 2,
        };
        let combos = make_combinations(3, 1).unwrap();
        let l = CombinationLayout::new(&ep, &combos[1]);
        assert_eq!(l.support_rows, vec![1, 4]);
        assert_eq!(l.query_rows, vec![2, 0, 5, 3]);
        assert_eq!(l.query_local, vec![1, 1, 2, 2]);
        assert_eq!(l.query_global, vec![4, 4, 2, 2]);
        assert_eq!(l.support_mean.row(1), &[0., 0., 0., 0., 1., 0.]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]), true);
        store.get_mut(id).grad = Tensor::from_vec(&[2], vec![0.5, -3.0]);
        let cfg = TrainConfig { weight_decay: 0.0, grad_clip: 0.0, ..Default::default() };
        Adam::new().step(&mut store, 0.01, &cfg);
        let v = store.value(id).data();
        assert!((v[0] - 0.99).abs() < 1e-6);
        assert!((v[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn adam_skips_buffers() {
        let mut store = ParamStore::new();
        let id = store.add("running_mean", Tensor::from_vec(&[1], vec![2.0]), false);
        store.get_mut(id).grad = Tensor::from_vec(&[1], vec![1.0]);
        Adam::new().step(&mut store, 0.1, &TrainConfig::default());
        assert_eq!(store.value(id).data(), &[2.0]);
    }
}
