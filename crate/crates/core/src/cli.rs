//! The `relnet` command line.
//!
//! Every command works on a run directory:
//!
//! ```text
//! <run-dir>/config.toml          resolved configuration
//! <run-dir>/corpus/              synthetic corpus (synth-data)
//! <run-dir>/metrics.jsonl        one record per epoch
//! <run-dir>/steps.jsonl          one loss record per optimizer step
//! <run-dir>/checkpoints/latest/  model, optimizer and trainer state
//! <run-dir>/reports/             evaluation reports, scores, embeddings
//! <run-dir>/curves.svg           plot-curves output
//! ```
//!
//! Failures print one JSON error record on stderr and exit with status 1.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};

use crate::audio::{clip_features, extract_features, load_clip};
use crate::checkpoint::{load_model, load_trainer, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};
use crate::evaluation::{
    all_pairs_trials, evaluate_identification, load_trials, score_trials_cached, verification_report, write_scores,
    EmbeddingCache,
};
use crate::manifest::{load_manifest, DatasetManifest, LoadOptions, Split};
use crate::model::{stream_rng, BackendKind, SpeakerModel};
use crate::plot::{eer_curve, read_metrics, render_svg};
use crate::synth::generate_synthetic_corpus;
use crate::training::{ClipSet, Regime, Stage, Trainer};

#[derive(Debug, Parser)]
#[command(name = "relnet", version, about = "Relation-network speaker verification and few-shot identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML). Defaults to `<run-dir>/config.toml` when
    /// present, otherwise built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "run")]
    pub run_dir: PathBuf,
}

fn backend_arg() -> impl TypedValueParser<Value = BackendKind> {
    PossibleValuesParser::new(BackendKind::ALL.map(BackendKind::as_str))
        .map(|s| s.parse::<BackendKind>().expect("restricted to known names"))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic speaker corpus.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Train (or continue training) a model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = PossibleValuesParser::new(["local", "global"]).map(|s| s.parse::<Stage>().unwrap()))]
        stage: Option<Stage>,
        #[arg(long, value_parser = PossibleValuesParser::new(["vanilla", "improved"]).map(|s| s.parse::<Regime>().unwrap()))]
        regime: Option<Regime>,
        #[arg(long, value_parser = backend_arg())]
        backend: Option<BackendKind>,
        #[arg(long)]
        n_way: Option<usize>,
        /// Episodes per epoch.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Score a trial list and report EER and minDCF.
    EvalVerify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = backend_arg())]
        backend: Option<BackendKind>,
    },
    /// Few-shot identification over held-out speakers.
    EvalIdentify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = backend_arg())]
        backend: Option<BackendKind>,
        #[arg(long)]
        n_way: Option<usize>,
        /// Number of evaluation episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Write the embedding of every manifest clip.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
    },
    /// Plot validation EER against epoch for one or more metrics logs.
    PlotCurves {
        #[command(flatten)]
        common: Common,
        /// Metrics logs as `LABEL=PATH` or `PATH`; defaults to the run's own.
        metrics: Vec<String>,
    },
}

/// Parses arguments, runs the command and returns the exit status.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let record = serde_json::json!({
                "status": "error",
                "kind": e.kind(),
                "message": e.to_string(),
            });
            eprintln!("{record}");
            1
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData { common } => synth_data(&common),
        Command::Train {
            common,
            stage,
            regime,
            backend,
            n_way,
            episodes,
        } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(s) = stage {
                cfg.train.stage = s;
            }
            if let Some(r) = regime {
                cfg.train.regime = r;
            }
            if let Some(b) = backend {
                cfg.backend = b;
            }
            if let Some(n) = n_way {
                cfg.train.n_way = n;
            }
            if let Some(e) = episodes {
                cfg.train.episodes_per_epoch = e;
            }
            cfg.validate()?;
            train(&cfg, &common.run_dir)
        }
        Command::EvalVerify { common, backend } => eval_verify(&common, backend),
        Command::EvalIdentify {
            common,
            backend,
            n_way,
            episodes,
        } => eval_identify(&common, backend, n_way, episodes),
        Command::ExportEmbeddings { common } => export_embeddings(&common),
        Command::PlotCurves { common, metrics } => plot_curves(&common, &metrics),
    }
}

fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints").join("latest")
}

/// `--config`, else the run directory's own config, else defaults; then
/// `--seed`.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let own = common.run_dir.join("config.toml");
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None if own.is_file() => RunConfig::load(&own)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.data.synth.seed = s;
    }
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).at(p)
}

fn synth_data(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    cfg.validate()?;
    let manifest_path = cfg.manifest_path(&common.run_dir);
    let out = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let m = generate_synthetic_corpus(&cfg.data.synth, &out)?;
    if manifest_path.file_name() != Some("manifest.tsv".as_ref()) {
        m.save(&manifest_path)?;
    }
    println!(
        "wrote {} clips of {} speakers; manifest {}",
        m.len(),
        m.num_speakers(),
        manifest_path.display()
    );
    Ok(())
}

fn load_data(cfg: &RunConfig, run_dir: &Path) -> Result<DatasetManifest> {
    load_manifest(
        &cfg.manifest_path(run_dir),
        LoadOptions {
            check_files: true,
            unseen_identification: false,
        },
    )
}

fn append_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .at(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).at(path)?;
    }
    Ok(())
}

/// Trains per `cfg`, continuing from the run's checkpoint when one exists.
pub fn train(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let manifest = load_data(cfg, run_dir)?;
    let ckpt = checkpoint_dir(run_dir);
    let mut trainer = if ckpt.is_dir() {
        let (old, mut t) = load_trainer(&ckpt)?;
        if old.encoder != cfg.encoder || old.relation != cfg.relation || t.model.backend != cfg.backend {
            return Err(Error::Config(format!(
                "{} holds a model with a different architecture or backend",
                ckpt.display()
            )));
        }
        t.config = cfg.train.clone();
        t
    } else {
        let model = SpeakerModel::new(cfg.encoder.clone(), cfg.relation.clone(), cfg.backend, cfg.train.seed)?;
        Trainer::new(model, cfg.train.clone())?
    };
    let train_m = manifest.subset(&[Split::Train]);
    let val_m = manifest.subset(&[cfg.eval.split]);
    create_dir(run_dir)?;
    cfg.save(&run_dir.join("config.toml"))?;
    let train_set = ClipSet::new(train_m.clone(), extract_features(&train_m, &cfg.features)?)?;
    let val_set = if val_m.is_empty() {
        None
    } else {
        Some(ClipSet::new(val_m.clone(), extract_features(&val_m, &cfg.features)?)?)
    };
    let metrics = run_dir.join("metrics.jsonl");
    let steps = run_dir.join("steps.jsonl");
    let mut steps_written = trainer.steps.len();
    let sink = |r: &crate::training::EpochRecord| -> Result<()> {
        append_jsonl(&metrics, std::slice::from_ref(r))?;
        log_epoch(r);
        Ok(())
    };
    if trainer.epoch == 0 {
        sink(&trainer.evaluate_record(Stage::Local, val_set.as_ref())?)?;
    }
    let stages: &[Stage] = match cfg.train.stage {
        Stage::Local => &[Stage::Local],
        Stage::Global => &[Stage::Local, Stage::Global],
    };
    for &stage in stages {
        loop {
            let (done, target) = match stage {
                Stage::Local => (trainer.local_epochs_done, cfg.train.local_epochs),
                Stage::Global => (trainer.global_epochs_done, cfg.train.global_epochs),
            };
            if done >= target {
                break;
            }
            let r = trainer.train_epoch(stage, &train_set, val_set.as_ref())?;
            sink(&r)?;
            append_jsonl(&steps, &trainer.steps[steps_written..])?;
            steps_written = trainer.steps.len();
            save_checkpoint(&ckpt, cfg, &trainer)?;
        }
    }
    if !ckpt.is_dir() {
        save_checkpoint(&ckpt, cfg, &trainer)?;
    }
    Ok(())
}

fn log_epoch(r: &crate::training::EpochRecord) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} epoch {:>3}  lr {:.6}  local {}  global {}  total {}  val_eer {}  {} ms",
        r.stage,
        r.epoch,
        r.lr,
        fmt(r.local),
        fmt(r.global),
        fmt(r.total),
        fmt(r.val_eer),
        r.wall_ms
    );
}

/// Model plus config for evaluation commands: the checkpoint's own config
/// unless `--config` is given.
fn eval_setup(common: &Common) -> Result<(RunConfig, SpeakerModel)> {
    let (ckpt_cfg, model) = load_model(&checkpoint_dir(&common.run_dir))?;
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => ckpt_cfg,
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok((cfg, model))
}

fn reports_dir(run_dir: &Path) -> Result<PathBuf> {
    let p = run_dir.join("reports");
    create_dir(&p)?;
    Ok(p)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").at(path)
}

fn eval_verify(common: &Common, backend: Option<BackendKind>) -> Result<()> {
    let (cfg, model) = eval_setup(common)?;
    let manifest = load_data(&cfg, &common.run_dir)?;
    let scorer = model.scorer(backend.unwrap_or(model.backend))?;
    let trials = match &cfg.eval.trials {
        Some(p) => load_trials(p)?,
        None => all_pairs_trials(&manifest.subset(&[cfg.eval.split])),
    };
    let mut cache = EmbeddingCache::new(|id: &str| {
        let i = manifest
            .find_clip(id)
            .ok_or_else(|| Error::MissingClips(vec![id.to_string()]))?;
        let clip = load_clip(&manifest.resolve(&manifest.entries()[i]))?;
        model.encoder.embed(&model.store, &clip_features(&clip, &cfg.features)?)
    });
    let scored = score_trials_cached(&trials, &mut cache, scorer.as_ref())?;
    let report = verification_report(&scored, cfg.eval.dcf, scorer.name())?;
    let dir = reports_dir(&common.run_dir)?;
    write_scores(&dir.join("scores.txt"), &scored)?;
    write_json(&dir.join("verification.json"), &report)?;
    println!(
        "{} trials  EER {:.2}%  minDCF {:.4}  ({})",
        report.n_trials,
        report.eer * 100.0,
        report.min_dcf,
        report.backend
    );
    Ok(())
}

fn embeddings_of(model: &SpeakerModel, manifest: &DatasetManifest, cfg: &RunConfig) -> Result<HashMap<String, crate::encoder::SpeakerEmbedding>> {
    let feats = extract_features(manifest, &cfg.features)?;
    let emb = model.embed_all(&feats.iter().collect::<Vec<_>>())?;
    Ok(manifest.entries().iter().map(|e| e.clip_id.clone()).zip(emb).collect())
}

fn eval_identify(common: &Common, backend: Option<BackendKind>, n_way: Option<usize>, episodes: Option<usize>) -> Result<()> {
    let (mut cfg, model) = eval_setup(common)?;
    if let Some(n) = n_way {
        cfg.eval.identification.n_way = n;
    }
    if let Some(e) = episodes {
        cfg.eval.identification.n_episodes = e;
    }
    cfg.validate()?;
    let manifest = load_data(&cfg, &common.run_dir)?;
    manifest.subset(&[Split::Train, cfg.eval.split]).check(LoadOptions {
        check_files: false,
        unseen_identification: true,
    })?;
    let eval_m = manifest.subset(&[cfg.eval.split]);
    let scorer = model.scorer(backend.unwrap_or(model.backend))?;
    let emb = embeddings_of(&model, &eval_m, &cfg)?;
    let mut rng = stream_rng(cfg.train.seed, &[20]);
    let report = evaluate_identification(&eval_m, &emb, cfg.eval.identification, scorer.as_ref(), &mut rng)?;
    write_json(&reports_dir(&common.run_dir)?.join("identification.json"), &report)?;
    println!(
        "{}-way accuracy {:.2}% ± {:.2} over {} episodes ({}; {} ties)",
        report.n_way,
        report.mean_accuracy * 100.0,
        report.ci95_halfwidth * 100.0,
        report.n_episodes,
        report.backend,
        report.ties
    );
    Ok(())
}

fn export_embeddings(common: &Common) -> Result<()> {
    let (cfg, model) = eval_setup(common)?;
    let manifest = load_data(&cfg, &common.run_dir)?;
    let emb = embeddings_of(&model, &manifest, &cfg)?;
    let rows: Vec<_> = manifest
        .entries()
        .iter()
        .map(|e| {
            serde_json::json!({
                "clip_id": e.clip_id,
                "speaker": e.speaker,
                "split": e.split,
                "embedding": emb[&e.clip_id].values,
            })
        })
        .collect();
    let path = reports_dir(&common.run_dir)?.join("embeddings.jsonl");
    if path.exists() {
        std::fs::remove_file(&path).at(&path)?;
    }
    append_jsonl(&path, &rows)?;
    println!("wrote {} embeddings to {}", rows.len(), path.display());
    Ok(())
}

fn plot_curves(common: &Common, metrics: &[String]) -> Result<()> {
    let inputs: Vec<(String, PathBuf)> = if metrics.is_empty() {
        vec![("run".to_string(), common.run_dir.join("metrics.jsonl"))]
    } else {
        metrics
            .iter()
            .map(|m| match m.split_once('=') {
                Some((label, path)) => (label.to_string(), PathBuf::from(path)),
                None => {
                    let p = PathBuf::from(m);
                    let label = p
                        .parent()
                        .and_then(|d| d.file_name())
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| m.clone());
                    (label, p)
                }
            })
            .collect()
    };
    let curves = inputs
        .iter()
        .map(|(label, path)| Ok(eer_curve(label, &read_metrics(path)?)))
        .collect::<Result<Vec<_>>>()?;
    let svg = render_svg(&curves, "Validation EER by epoch", "EER (%)")?;
    create_dir(&common.run_dir)?;
    let out = common.run_dir.join("curves.svg");
    std::fs::write(&out, svg).at(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
