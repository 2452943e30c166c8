//! Binary checkpoints for a [`MaesAssembly`].
//!
//! Layout (all integers little-endian, strings as `u32` length + UTF-8):
//!
//! ```text
//! "MAESCKPT" | u32 version
//! u32 word_size | u32 hidden_size | u32 mlp_hidden
//! u32 solver count, then per solver:
//!     str id | u8 task | u8 handoff | u8 read_only | u32 k | k × i64 offsets
//! str pipeline | str stage | u64 seed | u64 iterations | u8 converged
//! u32 tensor count, then per tensor:
//!     str name | str group | u32 rank | rank × u64 dims
//! f64 payload for every tensor, in table order
//! u64 FNV-1a hash of everything above
//! ```

use crate::memory::ShiftOffsets;
use crate::model::{Handoff, MaesAssembly, ModelDims, ModelError, SolverSpec};
use crate::tasks::Task;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MAESCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error("checkpoint truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint hash mismatch: file is corrupt")]
    Hash,
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("parameter {name}: checkpoint shape {found:?}, model shape {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where a checkpoint came from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Provenance {
    pub pipeline: String,
    pub stage: String,
    pub seed: u64,
    pub iterations: u64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub group: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dims: ModelDims,
    pub solvers: Vec<SolverSpec>,
    pub provenance: Provenance,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_assembly(model: &MaesAssembly, provenance: Provenance) -> Self {
        Self {
            dims: model.dims,
            solvers: model.solvers.iter().map(|s| s.spec.clone()).collect(),
            provenance,
            tensors: model
                .store
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    group: p.group.clone(),
                    tensor: p.value.clone(),
                })
                .collect(),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    /// Rebuilds the full assembly the checkpoint was taken from.
    pub fn to_assembly(&self) -> Result<MaesAssembly, CheckpointError> {
        let mut model = MaesAssembly::new(self.dims, &self.solvers, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    /// Overwrites every parameter of `model` from the checkpoint.
    pub fn restore_into(&self, model: &mut MaesAssembly) -> Result<(), CheckpointError> {
        let groups: Vec<String> = model.store.groups().map(str::to_string).collect();
        for g in groups {
            self.restore_group(model, &g)?;
        }
        Ok(())
    }

    /// Overwrites the parameters of one group, checking sizes first.
    pub fn restore_group(&self, model: &mut MaesAssembly, group: &str) -> Result<(), CheckpointError> {
        if model.dims.word_size != self.dims.word_size || model.dims.hidden_size != self.dims.hidden_size {
            return Err(CheckpointError::ConfigMismatch(format!(
                "checkpoint has word size {} and hidden size {}, model has {} and {}",
                self.dims.word_size, self.dims.hidden_size, model.dims.word_size, model.dims.hidden_size
            )));
        }
        let ids: Vec<_> = model
            .store
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, p)| (id, p.name.clone()))
            .collect();
        if ids.is_empty() {
            return Err(CheckpointError::ConfigMismatch(format!("model has no group {group}")));
        }
        for (id, name) in ids {
            let src = self
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            let dst = model.store.value_mut(id);
            if dst.shape() != src.tensor.shape() {
                return Err(CheckpointError::Shape {
                    name,
                    expected: dst.shape().to_vec(),
                    found: src.tensor.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(self.dims.word_size as u32);
        w.u32(self.dims.hidden_size as u32);
        w.u32(self.dims.mlp_hidden as u32);
        w.u32(self.solvers.len() as u32);
        for s in &self.solvers {
            w.str(&s.id);
            w.u8(s.task.id());
            w.u8(match s.handoff {
                Handoff::AttentionAtStart => 0,
                Handoff::AttentionAtEnd => 1,
            });
            w.u8(s.read_only as u8);
            w.u32(s.shift.len() as u32);
            for &o in s.shift.as_slice() {
                w.0.extend_from_slice(&o.to_le_bytes());
            }
        }
        let p = &self.provenance;
        w.str(&p.pipeline);
        w.str(&p.stage);
        w.u64(p.seed);
        w.u64(p.iterations);
        w.u8(p.converged as u8);
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.str(&t.name);
            w.str(&t.group);
            w.u32(t.tensor.shape().len() as u32);
            for &d in t.tensor.shape() {
                w.u64(d as u64);
            }
        }
        for t in &self.tensors {
            for v in t.tensor.data() {
                w.0.extend_from_slice(&v.to_le_bytes());
            }
        }
        let h = fnv1a(&w.0);
        w.u64(h);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { buf: bytes, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        if bytes.len() < 20 {
            return Err(CheckpointError::Corrupt("file ends before the hash".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(CheckpointError::Hash);
        }
        let mut r = Reader { buf: body, pos: 12 };
        let dims = ModelDims {
            word_size: r.u32()? as usize,
            hidden_size: r.u32()? as usize,
            mlp_hidden: r.u32()? as usize,
        };
        let n_solvers = r.u32()?;
        let mut solvers = Vec::new();
        for _ in 0..n_solvers {
            let id = r.str()?;
            let t = r.u8()?;
            let task = Task::from_id(t).ok_or_else(|| CheckpointError::Corrupt(format!("task id {t}")))?;
            let handoff = match r.u8()? {
                0 => Handoff::AttentionAtStart,
                1 => Handoff::AttentionAtEnd,
                b => return Err(CheckpointError::Corrupt(format!("handoff byte {b}"))),
            };
            let read_only = r.u8()? != 0;
            let k = r.u32()?;
            let mut offsets = Vec::new();
            for _ in 0..k {
                offsets.push(i64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            let shift = ShiftOffsets::new(offsets).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            solvers.push(SolverSpec {
                id,
                task,
                handoff,
                shift,
                read_only,
            });
        }
        let provenance = Provenance {
            pipeline: r.str()?,
            stage: r.str()?,
            seed: r.u64()?,
            iterations: r.u64()?,
            converged: r.u8()? != 0,
        };
        let n_tensors = r.u32()?;
        let mut table = Vec::new();
        for _ in 0..n_tensors {
            let name = r.str()?;
            let group = r.str()?;
            let rank = r.u32()?;
            let mut shape = Vec::new();
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            table.push((name, group, shape));
        }
        let mut tensors = Vec::new();
        for (name, group, shape) in table {
            let len: usize = shape.iter().product();
            let raw = r.take(
                len.checked_mul(8)
                    .ok_or_else(|| CheckpointError::Corrupt("tensor size".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::try_new(shape, data)
                .ok_or_else(|| CheckpointError::Corrupt(format!("bad shape for {name}")))?;
            tensors.push(NamedTensor { name, group, tensor });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(Self {
            dims,
            solvers,
            provenance,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Corrupt(format!("need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Corrupt("invalid UTF-8".into()))
    }
}
