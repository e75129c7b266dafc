//! Run configuration: one TOML document holding every setting of a run.
//! Unknown keys are rejected and omitted keys take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::RelationNetConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, IoContext, Result};
use crate::evaluation::{DcfParams, IdentificationConfig};
use crate::features::FeatureConfig;
use crate::manifest::Split;
use crate::model::BackendKind;
use crate::synth::SyntheticSpeakerSpec;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset manifest; defaults to `<run-dir>/corpus/manifest.tsv`.
    pub manifest: Option<PathBuf>,
    pub synth: SyntheticSpeakerSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synth: SyntheticSpeakerSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Split used for validation during training and for evaluation.
    pub split: Split,
    /// Trial list (`label enroll test`); all clip pairs of `split` when
    /// absent.
    pub trials: Option<PathBuf>,
    pub dcf: DcfParams,
    pub identification: IdentificationConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Val,
            trials: None,
            dcf: DcfParams::default(),
            identification: IdentificationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub features: FeatureConfig,
    pub encoder: EncoderConfig,
    pub relation: RelationNetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::RelationImproved,
            features: FeatureConfig::default(),
            encoder: EncoderConfig::default(),
            relation: RelationNetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Loads a config file; relative paths inside it become relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut c = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let absolutize = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        absolutize(&mut c.data.manifest);
        absolutize(&mut c.eval.trials);
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).at(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.relation.validate()?;
        self.train.validate()?;
        self.data.synth.validate()?;
        if self.features.n_mels != self.encoder.n_mels {
            return Err(Error::Config(format!(
                "features.n_mels = {} but encoder.n_mels = {}",
                self.features.n_mels, self.encoder.n_mels
            )));
        }
        let id = &self.eval.identification;
        if id.n_way == 0 || id.k == 0 || id.q == 0 || id.n_episodes == 0 {
            return Err(Error::Config("identification sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn manifest_path(&self, run_dir: &Path) -> PathBuf {
        self.data
            .manifest
            .clone()
            .unwrap_or_else(|| run_dir.join("corpus").join("manifest.tsv"))
    }
}
