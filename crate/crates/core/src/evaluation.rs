//! Verification metrics (EER, minDCF), trial lists, cached trial scoring and
//! the few-shot identification protocol.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{aggregate_support, VerificationBackend};
use crate::encoder::SpeakerEmbedding;
use crate::episodic::sample_episode;
use crate::error::{Error, IoContext, Result};
use crate::manifest::DatasetManifest;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl TrialLabel {
    pub fn is_target(self) -> bool {
        self == TrialLabel::Target
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub label: TrialLabel,
}

/// Parses `label enroll test` lines with label `1` (target) or `0`.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let label = match f.first() {
            Some(&"1") => TrialLabel::Target,
            Some(&"0") => TrialLabel::Nontarget,
            _ => {
                problems.push(format!("line {}: label must be 0 or 1", i + 1));
                continue;
            }
        };
        if f.len() != 3 {
            problems.push(format!("line {}: expected 3 fields, found {}", i + 1, f.len()));
            continue;
        }
        out.push(Trial {
            enroll_id: f[1].to_string(),
            test_id: f[2].to_string(),
            label,
        });
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::InvalidInput(problems.join("; ")))
    }
}

pub fn load_trials(path: &Path) -> Result<Vec<Trial>> {
    parse_trials(&std::fs::read_to_string(path).at(path)?)
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut s = String::new();
    for t in trials {
        let l = if t.label.is_target() { 1 } else { 0 };
        s.push_str(&format!("{l} {} {}\n", t.enroll_id, t.test_id));
    }
    std::fs::write(path, s).at(path)
}

/// Every unordered pair of the given clips, labelled by speaker identity.
pub fn all_pairs_trials(manifest: &DatasetManifest) -> Vec<Trial> {
    let e = manifest.entries();
    let mut out = Vec::new();
    for i in 0..e.len() {
        for j in i + 1..e.len() {
            out.push(Trial {
                enroll_id: e[i].clip_id.clone(),
                test_id: e[j].clip_id.clone(),
                label: if e[i].speaker == e[j].speaker {
                    TrialLabel::Target
                } else {
                    TrialLabel::Nontarget
                },
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub score: f64,
}

/// Writes `enroll test score` lines.
pub fn write_scores(path: &Path, scored: &[ScoredTrial]) -> Result<()> {
    let mut s = String::new();
    for t in scored {
        s.push_str(&format!("{} {} {}\n", t.trial.enroll_id, t.trial.test_id, t.score));
    }
    std::fs::write(path, s).at(path)
}

fn split_scores(scores: &[f64], labels: &[TrialLabel]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::InvalidInput(format!("score {s} is not a number")));
    }
    let mut tar = Vec::new();
    let mut non = Vec::new();
    for (&s, l) in scores.iter().zip(labels) {
        if l.is_target() {
            tar.push(s);
        } else {
            non.push(s);
        }
    }
    if tar.is_empty() || non.is_empty() {
        return Err(Error::InvalidInput(
            "metrics need at least one target and one nontarget trial".into(),
        ));
    }
    tar.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    Ok((tar, non))
}

/// `(threshold, P_miss, P_fa)` at every distinct score plus `+inf`, with
/// `score >= threshold` accepted.
fn operating_points(tar: &[f64], non: &[f64]) -> Vec<(f64, f64, f64)> {
    let mut thresholds: Vec<f64> = tar.iter().chain(non).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    let (mut i, mut j) = (0, 0);
    thresholds
        .into_iter()
        .map(|t| {
            while i < tar.len() && tar[i] < t {
                i += 1;
            }
            while j < non.len() && non[j] < t {
                j += 1;
            }
            (t, i as f64 / nt, (non.len() - j) as f64 / nn)
        })
        .collect()
}

/// Equal error rate and the threshold where miss and false-alarm rates
/// cross, interpolating linearly between adjacent operating points.
pub fn compute_eer(scores: &[f64], labels: &[TrialLabel]) -> Result<(f64, f64)> {
    let (tar, non) = split_scores(scores, labels)?;
    let pts = operating_points(&tar, &non);
    let i = pts
        .iter()
        .position(|&(_, miss, fa)| miss >= fa)
        .expect("miss reaches 1 and false alarms reach 0 at +inf");
    let (t1, m1, f1) = pts[i];
    if m1 == f1 || i == 0 {
        let t = if t1.is_finite() { t1 } else { pts[i - 1].0 };
        return Ok((m1.max(f1), t));
    }
    let (t0, m0, f0) = pts[i - 1];
    let a = (f0 - m0) / ((f0 - m0) - (f1 - m1));
    let t = if t1.is_finite() { t0 + a * (t1 - t0) } else { t0 };
    Ok((m0 + a * (m1 - m0), t))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn raw(&self, p_miss: f64, p_fa: f64) -> f64 {
        self.c_miss * p_miss * self.p_target + self.c_fa * p_fa * (1.0 - self.p_target)
    }

    pub fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

/// Minimum normalised detection cost over the threshold sweep, with its
/// threshold.
pub fn compute_min_dcf(scores: &[f64], labels: &[TrialLabel], params: DcfParams) -> Result<(f64, f64)> {
    let (tar, non) = split_scores(scores, labels)?;
    let norm = params.normalizer();
    let mut best = (f64::INFINITY, f64::NAN);
    for (t, miss, fa) in operating_points(&tar, &non) {
        let c = params.raw(miss, fa) / norm;
        if c < best.0 {
            best = (c, t);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub min_dcf_raw: f64,
    pub min_dcf_threshold: f64,
    pub p_target: f64,
    pub c_fa: f64,
    pub c_miss: f64,
    pub n_trials: usize,
    pub backend: String,
}

pub fn verification_report(scored: &[ScoredTrial], params: DcfParams, backend: &str) -> Result<VerificationReport> {
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let labels: Vec<TrialLabel> = scored.iter().map(|s| s.trial.label).collect();
    let (eer, eer_threshold) = compute_eer(&scores, &labels)?;
    let (min_dcf, min_dcf_threshold) = compute_min_dcf(&scores, &labels, params)?;
    Ok(VerificationReport {
        eer,
        eer_threshold,
        min_dcf,
        min_dcf_raw: min_dcf * params.normalizer(),
        min_dcf_threshold,
        p_target: params.p_target,
        c_fa: params.c_fa,
        c_miss: params.c_miss,
        n_trials: scored.len(),
        backend: backend.to_string(),
    })
}

/// Computes each clip's embedding at most once.
pub struct EmbeddingCache<F> {
    embed: F,
    cache: HashMap<String, SpeakerEmbedding>,
    calls: usize,
}

impl<F: FnMut(&str) -> Result<SpeakerEmbedding>> EmbeddingCache<F> {
    pub fn new(embed: F) -> Self {
        Self {
            embed,
            cache: HashMap::new(),
            calls: 0,
        }
    }

    /// Number of times the underlying embedding function ran.
    pub fn encoder_calls(&self) -> usize {
        self.calls
    }

    pub fn get(&mut self, clip_id: &str) -> Result<&SpeakerEmbedding> {
        if !self.cache.contains_key(clip_id) {
            let e = (self.embed)(clip_id)?;
            self.calls += 1;
            self.cache.insert(clip_id.to_string(), e);
        }
        Ok(&self.cache[clip_id])
    }

    pub fn into_map(self) -> HashMap<String, SpeakerEmbedding> {
        self.cache
    }
}

/// Scores trials against precomputed embeddings.
pub fn score_trials(
    trials: &[Trial],
    embeddings: &HashMap<String, SpeakerEmbedding>,
    backend: &dyn VerificationBackend,
) -> Result<Vec<ScoredTrial>> {
    let mut missing: Vec<String> = trials
        .iter()
        .flat_map(|t| [&t.enroll_id, &t.test_id])
        .filter(|id| !embeddings.contains_key(*id))
        .cloned()
        .collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::MissingClips(missing));
    }
    let pairs: Vec<_> = trials
        .iter()
        .map(|t| (&embeddings[&t.enroll_id], &embeddings[&t.test_id]))
        .collect();
    let scores = backend.score_batch(&pairs)?;
    Ok(trials
        .iter()
        .zip(scores)
        .map(|(t, score)| ScoredTrial { trial: t.clone(), score })
        .collect())
}

/// Fills the cache for every clip in the trials, then scores them.
pub fn score_trials_cached<F: FnMut(&str) -> Result<SpeakerEmbedding>>(
    trials: &[Trial],
    cache: &mut EmbeddingCache<F>,
    backend: &dyn VerificationBackend,
) -> Result<Vec<ScoredTrial>> {
    for t in trials {
        cache.get(&t.enroll_id)?;
        cache.get(&t.test_id)?;
    }
    score_trials(trials, &cache.cache, backend)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentificationConfig {
    pub n_way: usize,
    pub k: usize,
    pub q: usize,
    pub n_episodes: usize,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k: 1,
            q: 5,
            n_episodes: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub n_way: usize,
    pub k: usize,
    pub q: usize,
    pub n_episodes: usize,
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
    /// Queries whose best score was shared by several classes.
    pub ties: usize,
    pub backend: String,
}

/// Index of the largest score, lowest index on ties, and whether a tie
/// occurred.
pub fn argmax_lowest(scores: &[f64]) -> (usize, bool) {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    let tie = scores.iter().filter(|&&s| s == scores[best]).count() > 1;
    (best, tie)
}

/// Few-shot identification: per episode every query goes to the class whose
/// enrollment (mean of its support embeddings) scores highest.
pub fn evaluate_identification(
    manifest: &DatasetManifest,
    embeddings: &HashMap<String, SpeakerEmbedding>,
    cfg: IdentificationConfig,
    backend: &dyn VerificationBackend,
    rng: &mut impl Rng,
) -> Result<IdentificationReport> {
    if cfg.n_episodes == 0 {
        return Err(Error::InvalidInput("n_episodes must be positive".into()));
    }
    let entries = manifest.entries();
    let lookup = |i: usize| -> Result<&SpeakerEmbedding> {
        embeddings
            .get(&entries[i].clip_id)
            .ok_or_else(|| Error::MissingClips(vec![entries[i].clip_id.clone()]))
    };
    let mut accs = Vec::with_capacity(cfg.n_episodes);
    let mut ties = 0;
    for _ in 0..cfg.n_episodes {
        let ep = sample_episode(manifest, cfg.n_way, cfg.k, cfg.q, rng)?;
        let enroll = ep
            .classes
            .iter()
            .map(|c| {
                let support = c.clips[..cfg.k].iter().map(|&i| lookup(i).cloned()).collect::<Result<Vec<_>>>()?;
                aggregate_support(&support)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut queries = Vec::new();
        for (c, class) in ep.classes.iter().enumerate() {
            for &qi in &class.clips[cfg.k..] {
                queries.push((c, lookup(qi)?));
            }
        }
        let pairs: Vec<_> = queries
            .iter()
            .flat_map(|&(_, q)| enroll.iter().map(move |e| (e, q)))
            .collect();
        let scores = backend.score_batch(&pairs)?;
        let mut correct = 0;
        for (&(c, _), row) in queries.iter().zip(scores.chunks(enroll.len())) {
            let (best, tie) = argmax_lowest(row);
            ties += tie as usize;
            correct += (best == c) as usize;
        }
        let total = queries.len();
        accs.push(correct as f64 / total as f64);
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let sd = if accs.len() > 1 {
        (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(IdentificationReport {
        n_way: cfg.n_way,
        k: cfg.k,
        q: cfg.q,
        n_episodes: cfg.n_episodes,
        mean_accuracy: mean,
        ci95_halfwidth: 1.96 * sd / n.sqrt(),
        ties,
        backend: backend.name().to_string(),
    })
}
