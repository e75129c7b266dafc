//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit when
//! any criterion fails.
//!
//! `ACCEPTANCE_ONLY=6,7` restricts the run to the listed criteria.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::Rng;

use relnet_speaker::backend::RelationNetConfig;
use relnet_speaker::checkpoint::{load_trainer, save_checkpoint};
use relnet_speaker::config::RunConfig;
use relnet_speaker::encoder::EncoderConfig;
use relnet_speaker::episodic::make_combinations;
use relnet_speaker::evaluation::{
    all_pairs_trials, compute_eer, compute_min_dcf, evaluate_identification, DcfParams, IdentificationConfig, TrialLabel,
};
use relnet_speaker::features::FeatureConfig;
use relnet_speaker::model::{stream_rng, BackendKind, SpeakerModel};
use relnet_speaker::synth::SyntheticSpeakerSpec;
use relnet_speaker::training::{validation_eer, ClipSet, EpochRecord, Regime, Stage, TrainConfig, Trainer};

use common::{
    aggregated_loss_grad_check, as_tuples, brute_force_eer, brute_force_min_dcf, combination_by_definition,
    differing_params, full_size_table, random_score_set, rng, shape_oracle, small_trainer, split_by_label,
    tiny_encoder_grad_check, tiny_relation_grad_check,
};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn within(limit: Duration, took: Duration) -> bool {
    took <= limit
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

fn cyclic_regime() -> Verdict {
    let started = Instant::now();
    let mut problems = Vec::new();
    let mut checked = 0;
    for t in 2..=6 {
        for k in 1..t {
            let combos = make_combinations(t, k).unwrap();
            if combos.len() != t {
                problems.push(format!("T={t} k={k}: {} combinations", combos.len()));
            }
            let mut support_hits = vec![0; t + 1];
            for (i, c) in combos.iter().enumerate() {
                checked += 1;
                if (c.support.clone(), c.query.clone()) != combination_by_definition(t, k, i + 1) {
                    problems.push(format!("T={t} k={k} l={}", i + 1));
                }
                let s: BTreeSet<_> = c.support.iter().collect();
                let q: BTreeSet<_> = c.query.iter().collect();
                let all: BTreeSet<_> = s.union(&q).copied().copied().collect();
                if s.len() != k || q.len() != t - k || !s.is_disjoint(&q) || all != (1..=t).collect() {
                    problems.push(format!("T={t} k={k} l={}: not a partition", i + 1));
                }
                c.support.iter().for_each(|&p| support_hits[p] += 1);
            }
            if support_hits[1..].iter().any(|&h| h != k) {
                problems.push(format!("T={t} k={k}: support coverage {support_hits:?}"));
            }
        }
    }
    let took = started.elapsed();
    Verdict::new(
        problems.is_empty() && within(Duration::from_secs(1), took),
        format!("{checked} combinations checked, {} mismatches, {} (limit 1 s)", problems.len(), secs(took)),
    )
}

fn metric_oracles() -> Verdict {
    let started = Instant::now();
    let mut r = rng(99);
    let p = DcfParams::default();
    let (mut eer_err, mut dcf_err) = (0.0f64, 0.0f64);
    for _ in 0..500 {
        let (scores, labels) = random_score_set(&mut r, 200);
        let (tar, non) = split_by_label(&scores, &labels);
        eer_err = eer_err.max((compute_eer(&scores, &labels).unwrap().0 - brute_force_eer(&tar, &non)).abs());
        let oracle = brute_force_min_dcf(&tar, &non, p.p_target, p.c_miss, p.c_fa);
        dcf_err = dcf_err.max((compute_min_dcf(&scores, &labels, p).unwrap().0 - oracle).abs());
    }
    let labels = [TrialLabel::Target; 3]
        .into_iter()
        .chain([TrialLabel::Nontarget; 3])
        .collect::<Vec<_>>();
    let worked = compute_eer(&[0.9, 0.8, 0.4, 0.6, 0.2, 0.1], &labels).unwrap().0;
    let took = started.elapsed();
    Verdict::new(
        eer_err <= 1e-9 && dcf_err <= 1e-9 && worked == 1.0 / 3.0 && within(Duration::from_secs(10), took),
        format!(
            "500 sets: max |EER diff| {eer_err:.1e}, max |minDCF diff| {dcf_err:.1e} (tol 1e-9); worked example EER {worked} (exact 1/3); {} (limit 10 s)",
            secs(took)
        ),
    )
}

fn gradient_integrity() -> Verdict {
    let started = Instant::now();
    let checks = [
        ("encoder", tiny_encoder_grad_check()),
        ("relation", tiny_relation_grad_check()),
        ("aggregated", aggregated_loss_grad_check()),
    ];
    let took = started.elapsed();
    let pass = checks.iter().all(|(_, c)| c.max_rel_err <= 1e-3) && within(Duration::from_secs(120), took);
    let parts: Vec<String> = checks
        .iter()
        .map(|(n, c)| format!("{n} {:.1e} over {} scalars", c.max_rel_err, c.scalars))
        .collect();
    Verdict::new(pass, format!("max rel err: {} (tol 1e-3); {} (limit 120 s)", parts.join(", "), secs(took)))
}

fn loss_accounting() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let (mut t, train) = small_trainer(Regime::Improved, dir.path());
    t.config.lambda = 0.5;
    for stage in [Stage::Local, Stage::Local, Stage::Local, Stage::Global, Stage::Global] {
        t.train_epoch(stage, &train, None).unwrap();
    }
    let worst = t
        .steps
        .iter()
        .map(|s| (s.total - (s.local + s.lambda * s.global)).abs() / s.total.abs().max(1.0))
        .fold(0.0f64, f64::max);
    let global_steps = t.steps.iter().filter(|s| s.stage == Stage::Global && s.global > 0.0).count();

    let (mut a, _) = small_trainer(Regime::Improved, dir.path());
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
    let differing = differing_params(&a.model, &b.model);
    let same_losses = a.steps.iter().map(|s| s.local).eq(b.steps.iter().map(|s| s.local));
    Verdict::new(
        t.steps.len() == 15 && worst <= 1e-12 && global_steps == 6 && differing.is_empty() && same_losses,
        format!(
            "{} steps, max rel |total - (local + lambda global)| {worst:.1e} (tol 1e-12); lambda=0 fine-tune vs local: {} differing tensors, local losses identical: {same_losses}",
            t.steps.len(),
            differing.len()
        ),
    )
}

fn shape_contract() -> Verdict {
    let started = Instant::now();
    let cfg = EncoderConfig::paper_scale();
    let trace = as_tuples(&cfg.shape_trace(200).unwrap());
    let oracle = shape_oracle(&cfg, 200);
    let table = full_size_table();
    let matching = trace.iter().zip(&table).filter(|(a, b)| a == b).count();
    let took = started.elapsed();
    let concat = trace.iter().find(|r| r.0 == "conv5").map(|r| r.1);
    let out = trace.last().map(|r| r.2);
    Verdict::new(
        trace == oracle && trace == table && within(Duration::from_secs(1), took),
        format!(
            "{matching}/{} rows match; concat {concat:?}, output {out:?}; {} (limit 1 s)",
            table.len(),
            secs(took)
        ),
    )
}

/// The shared desk-scale experiment: 15 synthetic speakers with 20 two
/// second clips each, the last 5 held out.
struct Desk {
    _dir: tempfile::TempDir,
    train: ClipSet,
    val: ClipSet,
}

impl Desk {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpeakerSpec {
            n_speakers: 15,
            clips_per_speaker: 20,
            clip_seconds: 2.0,
            val_speakers: 5,
            seed: 1,
            ..Default::default()
        };
        let (_, train, val) = common::synthetic_sets(dir.path(), &spec, &FeatureConfig::default());
        Self { _dir: dir, train, val }
    }

    fn trainer(&self, backend: BackendKind, regime: Regime, seed: u64) -> Trainer {
        let model = SpeakerModel::new(EncoderConfig::default(), RelationNetConfig::default(), backend, seed).unwrap();
        let cfg = TrainConfig {
            regime,
            seed,
            ..Default::default()
        };
        Trainer::new(model, cfg).unwrap()
    }

    fn run(&self, t: &mut Trainer, stage: Stage, epochs: usize, validate: bool) -> Vec<EpochRecord> {
        (0..epochs)
            .map(|_| t.train_epoch(stage, &self.train, validate.then_some(&self.val)).unwrap())
            .collect()
    }

    fn random_baseline_eer(&self) -> f64 {
        let trials = all_pairs_trials(&self.val.manifest);
        let mut r = rng(7);
        let scores: Vec<f64> = trials.iter().map(|_| r.gen::<f64>()).collect();
        let labels: Vec<_> = trials.iter().map(|t| t.label).collect();
        compute_eer(&scores, &labels).unwrap().0
    }

    fn identification_accuracy(&self, model: &SpeakerModel, scorer: BackendKind, seed: u64) -> f64 {
        let emb = self.val.embeddings(model).unwrap();
        let map = self
            .val
            .manifest
            .entries()
            .iter()
            .map(|e| e.clip_id.clone())
            .zip(emb)
            .collect();
        let cfg = IdentificationConfig {
            n_way: 5,
            ..Default::default()
        };
        let backend = model.scorer(scorer).unwrap();
        evaluate_identification(&self.val.manifest, &map, cfg, backend.as_ref(), &mut stream_rng(seed, &[20]))
            .unwrap()
            .mean_accuracy
    }
}

fn first_epoch_at_or_below(records: &[EpochRecord], target: f64) -> Option<usize> {
    records.iter().find(|r| r.val_eer.unwrap() <= target).map(|r| r.epoch)
}

fn eers(records: &[EpochRecord]) -> String {
    records
        .iter()
        .map(|r| format!("{:.3}", r.val_eer.unwrap()))
        .collect::<Vec<_>>()
        .join(" ")
}

struct LearningRuns {
    improved: Vec<EpochRecord>,
    vanilla: Vec<EpochRecord>,
    improved_time: Duration,
}

fn learning_runs(desk: &Desk) -> LearningRuns {
    let started = Instant::now();
    let mut imp = desk.trainer(BackendKind::RelationImproved, Regime::Improved, 1);
    let improved = desk.run(&mut imp, Stage::Local, 30, true);
    let improved_time = started.elapsed();
    let mut van = desk.trainer(BackendKind::RelationImproved, Regime::Vanilla, 1);
    let vanilla = desk.run(&mut van, Stage::Local, 30, true);
    println!("      improved regime EER by epoch: {}", eers(&improved));
    println!("      vanilla regime EER by epoch:  {}", eers(&vanilla));
    LearningRuns {
        improved,
        vanilla,
        improved_time,
    }
}

fn desk_scale_learning(desk: &Desk, runs: &LearningRuns) -> Verdict {
    let best = runs.improved.iter().map(|r| r.val_eer.unwrap()).fold(1.0, f64::min);
    let reached = first_epoch_at_or_below(&runs.improved, 0.15);
    let random = desk.random_baseline_eer();
    let margin = random - best;
    Verdict::new(
        reached.is_some() && margin >= 0.25 && within(Duration::from_secs(30 * 60), runs.improved_time),
        format!(
            "best held-out EER {} (first <= 15% at epoch {reached:?}, limit 30), random-score EER {}, margin {:.1} points (min 25); 30 epochs in {} (limit 1800 s)",
            pct(best),
            pct(random),
            100.0 * margin,
            secs(runs.improved_time)
        ),
    )
}

fn regime_convergence(runs: &LearningRuns) -> Verdict {
    let target = runs.vanilla.last().unwrap().val_eer.unwrap();
    let reached = first_epoch_at_or_below(&runs.improved, target);
    let train_ms = |rs: &[EpochRecord]| rs.iter().map(|r| r.train_ms).sum::<u64>() as f64;
    let overhead = train_ms(&runs.improved) / train_ms(&runs.vanilla) - 1.0;
    Verdict::new(
        reached.is_some_and(|e| e <= 22) && overhead <= 0.15,
        format!(
            "vanilla epoch-30 EER {}; improved reaches it at epoch {reached:?} (limit 22); per-epoch training overhead {} (limit 15%)",
            pct(target),
            pct(overhead)
        ),
    )
}

fn global_supervision(desk: &Desk) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for seed in 1..=3 {
        let mut t = desk.trainer(BackendKind::RelationImproved, Regime::Improved, seed);
        desk.run(&mut t, Stage::Local, 15, false);
        let ckpt = dir.path().join(format!("seed{seed}"));
        let cfg = RunConfig {
            train: t.config.clone(),
            ..Default::default()
        };
        save_checkpoint(&ckpt, &cfg, &t).unwrap();
        for (lambda, out) in [(1.0, &mut with), (0.0, &mut without)] {
            let (_, mut ft) = load_trainer(&ckpt).unwrap();
            ft.config.lambda = lambda;
            desk.run(&mut ft, Stage::Global, 10, false);
            out.push(validation_eer(&ft.model, &desk.val).unwrap());
        }
    }
    let (m1, m0) = (median(with.clone()), median(without.clone()));
    Verdict::new(
        m1 <= m0,
        format!(
            "median held-out EER lambda=1 {} vs lambda=0 {} (seeds: {} / {})",
            pct(m1),
            pct(m0),
            with.iter().map(|&e| pct(e)).collect::<Vec<_>>().join(" "),
            without.iter().map(|&e| pct(e)).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn backend_ordering(desk: &Desk) -> Verdict {
    let (mut imp, mut van, mut cos) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 1..=3 {
        for (backend, out) in [
            (BackendKind::RelationImproved, &mut imp),
            (BackendKind::RelationVanilla, &mut van),
            (BackendKind::Cosine, &mut cos),
        ] {
            let trained = if backend == BackendKind::Cosine { BackendKind::Proto } else { backend };
            let mut t = desk.trainer(trained, Regime::Improved, seed);
            desk.run(&mut t, Stage::Local, 20, false);
            out.push(desk.identification_accuracy(&t.model, backend, seed));
        }
    }
    let (a, b, c) = (median(imp.clone()), median(van.clone()), median(cos.clone()));
    let show = |v: &[f64]| v.iter().map(|&x| pct(x)).collect::<Vec<_>>().join(" ");
    Verdict::new(
        a >= b - 0.02 && b >= c - 0.02,
        format!(
            "median 5-way accuracy: improved relation {}, vanilla relation {}, cosine {} (inversions up to 2 points allowed; seeds {} / {} / {})",
            pct(a),
            pct(b),
            pct(c),
            show(&imp),
            show(&van),
            show(&cos)
        ),
    )
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().map_or(true, |s| s.contains(&i));

    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |i: usize, name: &'static str, v: Verdict| {
        println!("{} [{i}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((i, name, v));
    };
    if wanted(1) {
        report(1, "cyclic-regime correctness", cyclic_regime());
    }
    if wanted(2) {
        report(2, "metric oracle equivalence", metric_oracles());
    }
    if wanted(3) {
        report(3, "gradient integrity", gradient_integrity());
    }
    if wanted(4) {
        report(4, "loss accounting", loss_accounting());
    }
    if wanted(5) {
        report(5, "shape contract", shape_contract());
    }
    if [6, 7, 8, 9].into_iter().any(wanted) {
        let desk = Desk::new();
        if wanted(6) || wanted(7) {
            let runs = learning_runs(&desk);
            if wanted(6) {
                report(6, "desk-scale learning", desk_scale_learning(&desk, &runs));
            }
            if wanted(7) {
                report(7, "regime convergence", regime_convergence(&runs));
            }
        }
        if wanted(8) {
            report(8, "global supervision", global_supervision(&desk));
        }
        if wanted(9) {
            report(9, "backend ordering", backend_ordering(&desk));
        }
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({failed:?})") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
