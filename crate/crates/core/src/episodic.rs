//! N-way k-shot episode sampling and the cyclic support/query combinations.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;

/// One class of an episode: a speaker and its sampled clips in draw order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeClass {
    /// Global speaker index in `1..=N'`.
    pub global_label: usize,
    /// Manifest entry indices, `T = k + q` of them.
    pub clips: Vec<usize>,
}

/// An N-way episode. The local label of `classes[i]` is `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<EpisodeClass>,
    pub k: usize,
    pub q: usize,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    /// Items per class.
    pub fn items_per_class(&self) -> usize {
        self.k + self.q
    }

    /// All clips, class-major: row `c * T + p` is position `p + 1` of class
    /// `c + 1`.
    pub fn flat_clips(&self) -> Vec<usize> {
        self.classes.iter().flat_map(|c| c.clips.iter().copied()).collect()
    }

    pub fn global_labels(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.global_label).collect()
    }
}

/// Draws `n_way` speakers and `k + q` clips of each, all without
/// replacement. Only speakers with at least `k + q` clips are eligible.
pub fn sample_episode(
    manifest: &DatasetManifest,
    n_way: usize,
    k: usize,
    q: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if n_way == 0 || k == 0 || q == 0 {
        return Err(Error::InvalidInput(format!(
            "episode sizes must be positive (N={n_way}, k={k}, q={q})"
        )));
    }
    let t = k + q;
    let by_speaker = manifest.clips_by_speaker();
    let eligible: Vec<usize> = (0..by_speaker.len()).filter(|&s| by_speaker[s].len() >= t).collect();
    if eligible.len() < n_way {
        let short = by_speaker.len() - eligible.len();
        return Err(Error::Insufficient(format!(
            "{n_way}-way episode needs {n_way} speakers with at least {t} clips; \
             manifest has {} such speakers ({} short; {short} speakers have too few clips)",
            eligible.len(),
            n_way - eligible.len()
        )));
    }
    let chosen: Vec<usize> = eligible.choose_multiple(rng, n_way).copied().collect();
    let classes = chosen
        .into_iter()
        .map(|s| EpisodeClass {
            global_label: s + 1,
            clips: by_speaker[s].choose_multiple(rng, t).copied().collect(),
        })
        .collect();
    Ok(Episode { classes, k, q })
}

/// Cyclic position `1 + (z - 1) mod T`.
pub fn cyclic_index(z: usize, t: usize) -> usize {
    debug_assert!(z >= 1 && t >= 1);
    1 + (z - 1) % t
}

/// Combination `l`: support and query positions (1-based), shared by every
/// class of the episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportQueryCombination {
    pub l: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// The `T` cyclic combinations. Combination 1 takes the first `k` positions
/// as support.
pub fn make_combinations(t: usize, k: usize) -> Result<Vec<SupportQueryCombination>> {
    if k == 0 || k >= t {
        return Err(Error::InvalidInput(format!(
            "need 1 <= k < T for a non-empty query set, got k={k}, T={t}"
        )));
    }
    Ok((1..=t)
        .map(|l| SupportQueryCombination {
            l,
            support: (l..l + k).map(|z| cyclic_index(z, t)).collect(),
            query: (l + k..l + t).map(|z| cyclic_index(z, t)).collect(),
        })
        .collect())
}
