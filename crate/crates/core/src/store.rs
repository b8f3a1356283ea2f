//! Embedded write-ahead store.
//!
//! The store is a single append-only file. Every mutation is framed as
//!
//! ```text
//! ┌──────────┬──────────┬─────────────────────┐
//! │ len: u32 │ crc: u32 │ payload: [u8; len]  │   (little endian)
//! └──────────┴──────────┴─────────────────────┘
//! ```
//!
//! where the payload is the JSON encoding of a [`Mutation`] and `crc` is its
//! CRC-32. A mutation is written (and by default fsynced) before it is applied
//! in memory. On open the log is replayed; a checksum mismatch on a complete
//! frame is corruption and the store refuses to open. An incomplete final frame
//! is a torn write from a crash and is dropped. After replay the log is
//! compacted into one frame per live entity.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::EnvironmentSpec;
use crate::experiment::{ExperimentRecord, RecordChange};
use crate::template::TemplateSpec;

const MAGIC: &[u8; 8] = b"CTOWAL01";
const FRAME_HEADER: usize = 8;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("store file {path} is corrupt at offset {offset}: {reason}")]
    StoreCorrupt { path: PathBuf, offset: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "data")]
pub enum Mutation {
    PutTemplate(TemplateSpec),
    DeleteTemplate { name: String },
    PutEnvironment(EnvironmentSpec),
    DeleteEnvironment { name: String },
    CreateExperiment(Box<ExperimentRecord>),
    UpdateExperiment { id: String, change: RecordChange },
}

/// Everything the store holds, as rebuilt by replay.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StoreState {
    pub templates: BTreeMap<String, TemplateSpec>,
    pub environments: BTreeMap<String, EnvironmentSpec>,
    /// In creation order.
    pub experiments: IndexMap<String, ExperimentRecord>,
}

impl StoreState {
    fn apply(&mut self, mutation: Mutation) -> Result<(), String> {
        match mutation {
            Mutation::PutTemplate(t) => {
                self.templates.insert(t.name.clone(), t);
            }
            Mutation::DeleteTemplate { name } => {
                self.templates.remove(&name);
            }
            Mutation::PutEnvironment(e) => {
                self.environments.insert(e.name.clone(), e);
            }
            Mutation::DeleteEnvironment { name } => {
                self.environments.remove(&name);
            }
            Mutation::CreateExperiment(record) => {
                self.experiments.insert(record.id.clone(), *record);
            }
            Mutation::UpdateExperiment { id, change } => {
                let record = self.experiments.get_mut(&id).ok_or_else(|| format!("update for unknown experiment {id}"))?;
                record.apply(change);
            }
        }
        Ok(())
    }

    fn compacted(&self) -> Vec<Mutation> {
        let templates = self.templates.values().cloned().map(Mutation::PutTemplate);
        let envs = self.environments.values().cloned().map(Mutation::PutEnvironment);
        let exps = self.experiments.values().cloned().map(|r| Mutation::CreateExperiment(Box::new(r)));
        templates.chain(envs).chain(exps).collect()
    }

    /// Canonical JSON of the whole state.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("state serialization is infallible")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StoreOptions {
    /// fsync after every append.
    pub sync_writes: bool,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions { sync_writes: true }
    }
}

pub struct Store {
    path: PathBuf,
    file: Mutex<File>,
    options: StoreOptions,
}

impl Store {
    pub fn open(path: impl AsRef<Path>, options: StoreOptions) -> Result<(Store, StoreState), StoreError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| StoreError::Io { path: path.clone(), source };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let state = match fs::read(&path) {
            Ok(bytes) => replay(&path, &bytes)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => StoreState::default(),
            Err(e) => return Err(io_err(e)),
        };
        write_compacted(&path, &state.compacted()).map_err(io_err)?;
        let file = OpenOptions::new().append(true).open(&path).map_err(io_err)?;
        Ok((Store { path, file: Mutex::new(file), options }, state))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, mutation: &Mutation) -> Result<(), StoreError> {
        let frame = encode_frame(mutation);
        let mut file = self.file.lock();
        let res = file.write_all(&frame).and_then(|_| if self.options.sync_writes { file.sync_data() } else { Ok(()) });
        res.map_err(|source| StoreError::Io { path: self.path.clone(), source })
    }

    /// CRC-32 of the current file contents.
    pub fn file_checksum(&self) -> Result<u32, StoreError> {
        let _guard = self.file.lock();
        let mut bytes = Vec::new();
        File::open(&self.path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| StoreError::Io { path: self.path.clone(), source })?;
        Ok(crc32fast::hash(&bytes))
    }
}

fn encode_frame(mutation: &Mutation) -> Vec<u8> {
    let payload = serde_json::to_vec(mutation).expect("mutation serialization is infallible");
    let mut frame = Vec::with_capacity(FRAME_HEADER + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    frame.extend_from_slice(&payload);
    frame
}

fn replay(path: &Path, bytes: &[u8]) -> Result<StoreState, StoreError> {
    let corrupt = |offset: usize, reason: String| StoreError::StoreCorrupt {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < MAGIC.len() {
        if MAGIC.starts_with(bytes) {
            return Ok(StoreState::default());
        }
        return Err(corrupt(0, "bad file header".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt(0, "bad file header".into()));
    }
    let mut state = StoreState::default();
    let mut pos = MAGIC.len();
    while pos < bytes.len() {
        if bytes.len() - pos < FRAME_HEADER {
            tracing::warn!(path = %path.display(), offset = pos, "dropping torn frame header");
            break;
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
        let start = pos + FRAME_HEADER;
        if bytes.len() - start < len {
            tracing::warn!(path = %path.display(), offset = pos, "dropping torn frame");
            break;
        }
        let payload = &bytes[start..start + len];
        if crc32fast::hash(payload) != crc {
            return Err(corrupt(pos, "checksum mismatch".into()));
        }
        let mutation: Mutation =
            serde_json::from_slice(payload).map_err(|e| corrupt(pos, format!("undecodable frame: {e}")))?;
        state.apply(mutation).map_err(|reason| corrupt(pos, reason))?;
        pos = start + len;
    }
    Ok(state)
}

fn write_compacted(path: &Path, mutations: &[Mutation]) -> io::Result<()> {
    let tmp = path.with_extension("compact");
    {
        let mut f = File::create(&tmp)?;
        let mut buf = MAGIC.to_vec();
        for m in mutations {
            buf.extend_from_slice(&encode_frame(m));
        }
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        // Directory fsync is best effort; not every filesystem supports it.
        let _ = File::open(dir).and_then(|d| d.sync_all());
    }
    Ok(())
}
