//! Binary checkpoints. Layout:
//!
//! ```text
//! magic "DLABCKPT" | version u32 | dtype u8 | manifest_len u64 | manifest JSON
//! | payload: parameter then buffer bytes, little-endian, manifest order
//! ```
//!
//! The manifest lists every tensor with its name, shape, partition and
//! byte offset, plus the optional RNG state and free-form metadata.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Partition};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: &[u8; 8] = b"DLABCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub partition: Partition,
    pub trainable: bool,
    #[serde(skip)]
    pub bytes: Vec<u8>,
}

/// Generator position: seed, stream and 128-bit word offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(r: &Rng) -> Self {
        RngState { seed: r.get_seed(), stream: r.get_stream(), word_pos: r.get_word_pos() }
    }

    pub fn restore(&self) -> Rng {
        use rand::SeedableRng;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dtype: DType,
    pub entries: Vec<CheckpointEntry>,
    pub rng: Option<RngState>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestRow>,
    rng: Option<RngState>,
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    #[serde(flatten)]
    entry: CheckpointEntry,
    offset: u64,
    len: u64,
}

impl Checkpoint {
    /// Snapshot of every parameter and buffer of `store`.
    pub fn from_store<T: Float>(store: &ParamStore<T>, rng: Option<&Rng>, meta: serde_json::Value) -> Self {
        let mut entries: Vec<CheckpointEntry> = store
            .params()
            .iter()
            .map(|p| CheckpointEntry {
                name: p.name.clone(),
                kind: EntryKind::Param,
                shape: p.value.shape().to_vec(),
                partition: p.partition,
                trainable: p.trainable,
                bytes: p.value.to_le_bytes(),
            })
            .collect();
        entries.extend(store.buffers().iter().map(|b| CheckpointEntry {
            name: b.name.clone(),
            kind: EntryKind::Buffer,
            shape: b.value.shape().to_vec(),
            partition: b.partition,
            trainable: false,
            bytes: b.value.to_le_bytes(),
        }));
        Checkpoint { dtype: T::DTYPE, entries, rng: rng.map(RngState::capture), meta }
    }

    pub fn entry(&self, name: &str, kind: EntryKind) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name && e.kind == kind)
    }

    pub fn tensor<T: Float>(&self, e: &CheckpointEntry) -> Result<Tensor<T>> {
        if T::DTYPE != self.dtype {
            return Err(Error::format(format!("checkpoint holds {:?}, requested {:?}", self.dtype, T::DTYPE)));
        }
        Tensor::from_le_bytes(&e.shape, &e.bytes)
    }

    /// Copies the values of every parameter and buffer in `partitions`
    /// from the checkpoint into `store`, matched by name. Trainable flags
    /// are left alone. Returns the number of tensors copied.
    pub fn load_into<T: Float>(&self, store: &mut ParamStore<T>, partitions: &[Partition]) -> Result<usize> {
        let mut copied = 0;
        let params: Vec<_> = store.param_ids().filter(|&id| partitions.contains(&store.param(id).partition)).collect();
        for id in params {
            let name = store.param(id).name.clone();
            let e = self.entry(&name, EntryKind::Param).ok_or_else(|| Error::config(format!("checkpoint lacks parameter {name}")))?;
            let t = self.tensor::<T>(e)?;
            let p = store.param_mut(id);
            if t.shape() != p.value.shape() {
                return Err(Error::config(format!("checkpoint {name} has shape {:?}, model wants {:?}", t.shape(), p.value.shape())));
            }
            p.value = t;
            copied += 1;
        }
        let bufs: Vec<_> = (0..store.buffers().len()).filter(|&i| partitions.contains(&store.buffers()[i].partition)).collect();
        for i in bufs {
            let name = store.buffers()[i].name.clone();
            let id = store.find_buffer(&name).expect("listed above");
            let e = self.entry(&name, EntryKind::Buffer).ok_or_else(|| Error::config(format!("checkpoint lacks buffer {name}")))?;
            let t = self.tensor::<T>(e)?;
            let b = store.buffer_mut(id);
            if t.shape() != b.value.shape() {
                return Err(Error::config(format!("checkpoint {name} has shape {:?}, model wants {:?}", t.shape(), b.value.shape())));
            }
            b.value = t;
            copied += 1;
        }
        Ok(copied)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let rows = self
            .entries
            .iter()
            .map(|e| {
                let row = ManifestRow { entry: e.clone(), offset, len: e.bytes.len() as u64 };
                offset += e.bytes.len() as u64;
                row
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest { entries: rows, rng: self.rng, meta: self.meta.clone() })?;
        let mut out = Vec::with_capacity(21 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.dtype.tag());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for e in &self.entries {
            out.extend_from_slice(&e.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format(format!("checkpoint: {m}"));
        if bytes.len() < 21 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let dtype = DType::from_tag(bytes[12]).ok_or_else(|| bad("unknown dtype tag"))?;
        let mlen = u64::from_le_bytes(bytes[13..21].try_into().expect("8 bytes")) as usize;
        let mend = 21usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[21..mend]).map_err(|e| bad(&e.to_string()))?;
        let payload = &bytes[mend..];
        let mut entries = Vec::with_capacity(manifest.entries.len());
        let mut expect_offset = 0u64;
        for row in manifest.entries {
            let (o, l) = (row.offset as usize, row.len as usize);
            if row.offset != expect_offset || o + l > payload.len() {
                return Err(bad(&format!("entry {} lies outside the payload", row.entry.name)));
            }
            if l != row.entry.shape.iter().product::<usize>() * dtype.size_of() {
                return Err(bad(&format!("entry {} length does not match its shape", row.entry.name)));
            }
            expect_offset += row.len;
            let mut e = row.entry;
            e.bytes = payload[o..o + l].to_vec();
            entries.push(e);
        }
        if expect_offset as usize != payload.len() {
            return Err(bad("trailing bytes after the payload"));
        }
        Ok(Checkpoint { dtype, entries, rng: manifest.rng, meta: manifest.meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Restores every tensor and trainable flag into a store of identical
    /// structure.
    pub fn restore_store<T: Float>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let n_params = self.entries.iter().filter(|e| e.kind == EntryKind::Param).count();
        if n_params != store.params().len() || self.entries.len() - n_params != store.buffers().len() {
            return Err(Error::config("checkpoint structure does not match the model"));
        }
        self.load_into(store, &Partition::ALL)?;
        let ids: Vec<_> = store.param_ids().collect();
        for id in ids {
            let e = self.entry(&store.param(id).name, EntryKind::Param).expect("loaded above");
            store.set_trainable(id, e.trainable);
        }
        Ok(())
    }
}
