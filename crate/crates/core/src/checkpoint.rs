//! Checkpoints: a directory holding the resolved run config, trainer state
//! and two tensor archives (parameters and optimizer moments).
//!
//! Tensor archive layout, all integers little-endian:
//!
//! ```text
//! magic  b"RNTA"   version u32 (= 1)   count u64
//! per entry:
//!   name_len u32   name (UTF-8)   trainable u8   rank u32
//!   dims u64 x rank   data f64 x prod(dims)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::GlobalPrototypeBank;
use crate::config::RunConfig;
use crate::encoder::SpeakerEmbedding;
use crate::error::{Error, IoContext, Result};
use crate::model::{BackendKind, SpeakerModel};
use crate::tensor::Tensor;
use crate::training::Trainer;

const MAGIC: &[u8; 4] = b"RNTA";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor,
}

pub fn write_archive(path: &Path, entries: &[ArchiveEntry]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(e.trainable as u8);
        buf.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).at(path)?;
    f.write_all(&buf).at(path)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!("archive truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_archive(path: &Path) -> Result<Vec<ArchiveEntry>> {
    let mut data = Vec::new();
    std::fs::File::open(path).at(path)?.read_to_end(&mut data).at(path)?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(bad("not a tensor archive".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported archive version {version}")));
    }
    let count = c.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| bad("entry name is not UTF-8".into()))?;
        let trainable = c.take(1)?[0] != 0;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let bytes = c.take(len * 8)?;
        let values = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push(ArchiveEntry {
            name,
            trainable,
            tensor: Tensor::from_vec(&shape, values),
        });
    }
    if c.pos != data.len() {
        return Err(bad("trailing bytes after the last entry".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub format: u32,
    pub backend: BackendKind,
    pub epoch: usize,
    pub local_epochs_done: usize,
    pub global_epochs_done: usize,
    pub updates: u64,
    pub has_bank: bool,
    /// Adam step counts by parameter name.
    pub adam_steps: BTreeMap<String, u64>,
}

/// Writes `dir` atomically: a sibling temporary directory is filled and
/// then renamed over it.
pub fn save_checkpoint(dir: &Path, config: &RunConfig, trainer: &Trainer) -> Result<()> {
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).at(&tmp)?;
    }
    std::fs::create_dir_all(&tmp).at(&tmp)?;
    config.save(&tmp.join("config.toml"))?;
    let store = &trainer.model.store;
    let params: Vec<ArchiveEntry> = store
        .iter()
        .map(|(_, p)| ArchiveEntry {
            name: p.name.clone(),
            trainable: p.trainable,
            tensor: p.value.clone(),
        })
        .collect();
    write_archive(&tmp.join("params.bin"), &params)?;
    let mut moments = Vec::new();
    let mut adam_steps = BTreeMap::new();
    for (id, p) in store.iter() {
        if let Some(Some((m, v, t))) = trainer.optimizer.state.get(id.0) {
            for (prefix, t) in [("m", m), ("v", v)] {
                moments.push(ArchiveEntry {
                    name: format!("{prefix}/{}", p.name),
                    trainable: false,
                    tensor: t.clone(),
                });
            }
            adam_steps.insert(p.name.clone(), *t);
        }
    }
    write_archive(&tmp.join("optimizer.bin"), &moments)?;
    let state = TrainerState {
        format: VERSION,
        backend: trainer.model.backend,
        epoch: trainer.epoch,
        local_epochs_done: trainer.local_epochs_done,
        global_epochs_done: trainer.global_epochs_done,
        updates: trainer.updates,
        has_bank: trainer.model.bank.is_some(),
        adam_steps,
    };
    let p = tmp.join("state.json");
    std::fs::write(&p, serde_json::to_string_pretty(&state)?).at(&p)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).at(dir)?;
    }
    std::fs::rename(&tmp, dir).at(dir)
}

fn read_state(dir: &Path) -> Result<TrainerState> {
    let p = dir.join("state.json");
    Ok(serde_json::from_str(&std::fs::read_to_string(&p).at(&p)?)?)
}

/// Rebuilds the model stored in a checkpoint.
pub fn load_model(dir: &Path) -> Result<(RunConfig, SpeakerModel)> {
    let config = RunConfig::from_toml(&std::fs::read_to_string(dir.join("config.toml")).at(dir.join("config.toml"))?)?;
    let state = read_state(dir)?;
    let mut model = SpeakerModel::new(config.encoder.clone(), config.relation.clone(), state.backend, 0)?;
    let entries = read_archive(&dir.join("params.bin"))?;
    let mut by_name: BTreeMap<&str, &ArchiveEntry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    if state.has_bank {
        let e = by_name
            .remove(GlobalPrototypeBank::PARAM_NAME)
            .ok_or_else(|| Error::Checkpoint("prototype bank missing from params.bin".into()))?;
        let rows: Vec<SpeakerEmbedding> = (0..e.tensor.dim(0))
            .map(|r| SpeakerEmbedding::new(e.tensor.row(r).to_vec()))
            .collect();
        model.bank = Some(GlobalPrototypeBank::new(&mut model.store, &rows)?);
    }
    let mut problems = Vec::new();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.get(id).name.clone();
        if name == GlobalPrototypeBank::PARAM_NAME {
            continue;
        }
        match by_name.remove(name.as_str()) {
            Some(e) if e.tensor.shape() == model.store.value(id).shape() => {
                *model.store.value_mut(id) = e.tensor.clone();
            }
            Some(e) => problems.push(format!(
                "{name}: stored shape {:?}, model expects {:?}",
                e.tensor.shape(),
                model.store.value(id).shape()
            )),
            None => problems.push(format!("{name}: missing")),
        }
    }
    problems.extend(by_name.keys().map(|k| format!("{k}: not part of the model")));
    if !problems.is_empty() {
        return Err(Error::Checkpoint(problems.join("; ")));
    }
    Ok((config, model))
}

/// Rebuilds a trainer, optimizer state included, so training can continue
/// exactly where it stopped.
pub fn load_trainer(dir: &Path) -> Result<(RunConfig, Trainer)> {
    let (config, model) = load_model(dir)?;
    let state = read_state(dir)?;
    let mut trainer = Trainer::new(model, config.train.clone())?;
    trainer.epoch = state.epoch;
    trainer.local_epochs_done = state.local_epochs_done;
    trainer.global_epochs_done = state.global_epochs_done;
    trainer.updates = state.updates;
    let moments = read_archive(&dir.join("optimizer.bin"))?;
    let by_name: BTreeMap<&str, &Tensor> = moments.iter().map(|e| (e.name.as_str(), &e.tensor)).collect();
    let store = &trainer.model.store;
    trainer.optimizer.state = vec![None; store.len()];
    for (id, p) in store.iter() {
        if let Some(&t) = state.adam_steps.get(&p.name) {
            let get = |prefix: &str| {
                by_name
                    .get(format!("{prefix}/{}", p.name).as_str())
                    .map(|t| (*t).clone())
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer moments for {} missing", p.name)))
            };
            trainer.optimizer.state[id.0] = Some((get("m")?, get("v")?, t));
        }
    }
    Ok((config, trainer))
}
