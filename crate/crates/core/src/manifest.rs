//! Dataset manifests: a tab-separated table of clips with a header line
//! `clip_id  path  speaker  split`. Relative paths resolve against the
//! manifest's directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub path: PathBuf,
    pub speaker: String,
    pub split: Split,
}

/// Clips plus a speaker table. Speakers get global indices `1..=N'` in
/// order of first appearance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    speakers: Vec<String>,
    speaker_index: HashMap<String, usize>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Report clips whose audio file does not exist.
    pub check_files: bool,
    /// Reject speakers whose clips appear both in `train` and in `val`/`test`.
    pub unseen_identification: bool,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut problems = Vec::new();
        let mut seen = HashSet::new();
        let mut speakers = Vec::new();
        let mut speaker_index = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.clip_id.is_empty() {
                problems.push(format!("entry {}: empty clip_id", i + 1));
            } else if !seen.insert(e.clip_id.as_str()) {
                problems.push(format!("duplicate clip_id {}", e.clip_id));
            }
            if e.speaker.is_empty() {
                problems.push(format!("clip {}: empty speaker", e.clip_id));
            } else if !speaker_index.contains_key(&e.speaker) {
                speakers.push(e.speaker.clone());
                speaker_index.insert(e.speaker.clone(), speakers.len());
            }
        }
        if !problems.is_empty() {
            return Err(Error::Manifest(problems));
        }
        Ok(Self {
            root: root.into(),
            entries,
            speakers,
            speaker_index,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    /// Global index (1-based) of a speaker.
    pub fn speaker_index(&self, speaker: &str) -> Option<usize> {
        self.speaker_index.get(speaker).copied()
    }

    pub fn label(&self, entry: usize) -> usize {
        self.speaker_index[&self.entries[entry].speaker]
    }

    pub fn find_clip(&self, clip_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.clip_id == clip_id)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    /// Entry indices grouped by global speaker index (position `C - 1`).
    pub fn clips_by_speaker(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.speakers.len()];
        for i in 0..self.entries.len() {
            out[self.label(i) - 1].push(i);
        }
        out
    }

    /// A manifest restricted to the given splits, with speakers re-indexed.
    pub fn subset(&self, splits: &[Split]) -> Self {
        let entries = self
            .entries
            .iter()
            .filter(|e| splits.contains(&e.split))
            .cloned()
            .collect();
        Self::new(self.root.clone(), entries).expect("a subset of a valid manifest is valid")
    }

    pub fn check(&self, opts: LoadOptions) -> Result<()> {
        let mut problems = Vec::new();
        if opts.check_files {
            for e in &self.entries {
                let p = self.resolve(e);
                if !p.is_file() {
                    problems.push(format!("clip {}: missing audio file {}", e.clip_id, p.display()));
                }
            }
        }
        if opts.unseen_identification {
            let mut splits: BTreeMap<&str, HashSet<Split>> = BTreeMap::new();
            for e in &self.entries {
                splits.entry(&e.speaker).or_default().insert(e.split);
            }
            for (spk, s) in splits {
                if s.contains(&Split::Train) && s.len() > 1 {
                    problems.push(format!(
                        "speaker {spk} appears in training and evaluation splits"
                    ));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Manifest(problems))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| csv_error(path, e))?;
        }
        w.flush().at(path)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Manifest(vec![format!("{}: {e}", path.display())])
}

pub fn load_manifest(path: &Path, opts: LoadOptions) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).at(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = parse_manifest(&text, root)?;
    m.check(opts)?;
    Ok(m)
}

pub fn parse_manifest(text: &str, root: PathBuf) -> Result<DatasetManifest> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut entries = Vec::new();
    let mut problems = Vec::new();
    for (i, row) in r.deserialize::<ManifestEntry>().enumerate() {
        match row {
            Ok(e) => entries.push(e),
            Err(e) => problems.push(format!("row {}: {e}", i + 1)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Manifest(problems));
    }
    DatasetManifest::new(root, entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "clip_id\tpath\tspeaker\tsplit\n";

    #[test]
    fn three_lines() {
        let text = format!("{HEADER}a\ta.wav\ts1\ttrain\nb\tb.wav\ts2\ttrain\nc\tc.wav\ts1\ttest\n");
        let m = parse_manifest(&text, PathBuf::from("/data")).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.num_speakers(), 2);
        assert_eq!(m.speaker_index("s2"), Some(2));
        assert_eq!(m.resolve(&m.entries()[0]), PathBuf::from("/data/a.wav"));
    }

    #[test]
    fn duplicate_clip_named() {
        let text = format!("{HEADER}a\ta.wav\ts1\ttrain\na\tb.wav\ts2\ttrain\n");
        match parse_manifest(&text, PathBuf::new()) {
            Err(Error::Manifest(p)) => assert!(p[0].contains("duplicate clip_id a")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unseen_flag_rejects_shared_speaker() {
        let text = format!("{HEADER}a\ta.wav\ts1\ttrain\nb\tb.wav\ts1\ttest\n");
        let m = parse_manifest(&text, PathBuf::new()).unwrap();
        assert!(m.check(LoadOptions::default()).is_ok());
        assert!(m
            .check(LoadOptions {
                unseen_identification: true,
                ..Default::default()
            })
            .is_err());
    }

    #[test]
    fn missing_files_reported_together() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("{HEADER}a\ta.wav\ts1\ttrain\nb\tb.wav\ts1\ttrain\n");
        let m = parse_manifest(&text, dir.path().to_path_buf()).unwrap();
        match m.check(LoadOptions {
            check_files: true,
            ..Default::default()
        }) {
            Err(Error::Manifest(p)) => assert_eq!(p.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_split_and_empty_speaker() {
        assert!(parse_manifest(&format!("{HEADER}a\ta.wav\ts1\tdev\n"), PathBuf::new()).is_err());
        assert!(parse_manifest(&format!("{HEADER}a\ta.wav\t\ttrain\n"), PathBuf::new()).is_err());
    }

    #[test]
    fn subset_reindexes() {
        let text = format!("{HEADER}a\ta.wav\ts1\ttest\nb\tb.wav\ts2\ttrain\nc\tc.wav\ts3\ttrain\n");
        let m = parse_manifest(&text, PathBuf::new()).unwrap().subset(&[Split::Train]);
        assert_eq!(m.speakers(), &["s2".to_string(), "s3".to_string()]);
        assert_eq!(m.clips_by_speaker(), vec![vec![0], vec![1]]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ManifestEntry {
                clip_id: "x1".into(),
                path: "wav/x1.wav".into(),
                speaker: "spk 1".into(),
                split: Split::Val,
            },
            ManifestEntry {
                clip_id: "x2".into(),
                path: "wav/x2.wav".into(),
                speaker: "spk2".into(),
                split: Split::Train,
            },
        ];
        let m = DatasetManifest::new(dir.path(), entries).unwrap();
        let p = dir.path().join("manifest.tsv");
        m.save(&p).unwrap();
        assert_eq!(load_manifest(&p, LoadOptions::default()).unwrap(), m);
    }
}
