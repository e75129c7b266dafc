//! A speaker model: encoder, optional relation network and optional global
//! prototype bank sharing one parameter store.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{
    CosineBackend, GlobalPrototypeBank, RelationBackend, RelationInput, RelationNet, RelationNetConfig,
    VerificationBackend,
};
use crate::encoder::{Encoder, EncoderConfig, SpeakerEmbedding};
use crate::error::{Error, Result};
use crate::features::LogMelFeatures;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    RelationImproved,
    RelationVanilla,
    Cosine,
    Proto,
}

impl BackendKind {
    pub const ALL: [BackendKind; 4] = [
        BackendKind::RelationImproved,
        BackendKind::RelationVanilla,
        BackendKind::Cosine,
        BackendKind::Proto,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::RelationImproved => "relation-improved",
            BackendKind::RelationVanilla => "relation-vanilla",
            BackendKind::Cosine => "cosine",
            BackendKind::Proto => "proto",
        }
    }

    pub fn relation_input(self) -> Option<RelationInput> {
        match self {
            BackendKind::RelationImproved => Some(RelationInput::Improved),
            BackendKind::RelationVanilla => Some(RelationInput::Vanilla),
            BackendKind::Cosine | BackendKind::Proto => None,
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown backend {s:?}")))
    }
}

/// Seed mixing (splitmix64) so that every random stream is a pure function
/// of the run seed and a few counters.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn stream_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

pub(crate) const STREAM_INIT: u64 = 1;

pub struct SpeakerModel {
    pub backend: BackendKind,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub relation: Option<RelationNet>,
    pub bank: Option<GlobalPrototypeBank>,
}

impl SpeakerModel {
    /// Fresh weights; identical for identical `(configs, backend, seed)`.
    pub fn new(encoder: EncoderConfig, relation: RelationNetConfig, backend: BackendKind, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, &[STREAM_INIT]);
        let mut store = ParamStore::new();
        let m = encoder.embedding_dim;
        let encoder = Encoder::new(encoder, &mut store, &mut rng)?;
        let relation = match backend.relation_input() {
            Some(kind) => Some(RelationNet::new(&mut store, "relation", kind, m, relation, &mut rng)?),
            None => None,
        };
        Ok(Self {
            backend,
            store,
            encoder,
            relation,
            bank: None,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.config.embedding_dim
    }

    pub fn embed_all(&self, features: &[&LogMelFeatures]) -> Result<Vec<SpeakerEmbedding>> {
        self.encoder.embed_many(&self.store, features)
    }

    /// The scorer for `kind`. Relation kinds need a matching relation net.
    pub fn scorer(&self, kind: BackendKind) -> Result<Box<dyn VerificationBackend + '_>> {
        match kind {
            BackendKind::Cosine | BackendKind::Proto => Ok(Box::new(CosineBackend)),
            _ => match &self.relation {
                Some(net) if Some(net.kind) == kind.relation_input() => Ok(Box::new(RelationBackend {
                    net,
                    store: &self.store,
                })),
                _ => Err(Error::Config(format!(
                    "backend {kind} needs a model trained with that relation network (this one uses {})",
                    self.backend
                ))),
            },
        }
    }

    /// The scorer matching the training backend.
    pub fn default_scorer(&self) -> Result<Box<dyn VerificationBackend + '_>> {
        self.scorer(self.backend)
    }
}
