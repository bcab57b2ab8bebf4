//! Binary checkpoints: magic, version, JSON metadata, then named tensor
//! records stored as f32 or f64.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::heads::HeadSpec;
use crate::model::is_backbone;
use crate::numerics::{OptimizerState, ParamStore, SchedulerState, Tensor};
use crate::ssl::PretrainState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ANYSATCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Pretrain,
    Adapt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub config_hash: String,
    pub config: RunConfig,
    /// Next training step.
    pub step: usize,
    pub seed: u64,
    /// Number of scalars per record group.
    pub param_counts: BTreeMap<String, usize>,
    pub backbone_hash: String,
    #[serde(default)]
    pub datasets: Vec<String>,
    #[serde(default)]
    pub optimizer_step: u64,
    #[serde(default)]
    pub scheduler: Option<SchedulerState>,
    #[serde(default)]
    pub plateau_window: Vec<f64>,
    #[serde(default)]
    pub head: Option<HeadSpec>,
    #[serde(default)]
    pub backbone_pretrained: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub records: Vec<Record>,
}

/// SHA-256 over the names, shapes and f64 values of the backbone parameters.
pub fn backbone_hash(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    let mut params: Vec<_> = store.iter().filter(|p| is_backbone(&p.name)).collect();
    params.sort_by(|a, b| a.name.cmp(&b.name));
    for p in params {
        h.update(p.name.as_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    /// Appends every parameter of `store` as `{prefix}/{name}`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore, dtype: DType) {
        for p in store.iter() {
            self.records.push(Record { name: format!("{prefix}/{}", p.name), dtype, value: p.value.clone() });
        }
        self.meta.param_counts.insert(prefix.to_string(), store.iter().map(|p| p.value.numel()).sum());
    }

    /// Parameters stored under `{prefix}/`, in record order.
    pub fn store(&self, prefix: &str) -> Result<ParamStore> {
        let head = format!("{prefix}/");
        let mut out = ParamStore::new();
        for r in self.records.iter().filter(|r| r.name.starts_with(&head)) {
            out.insert(&r.name[head.len()..], r.value.clone())?;
        }
        if out.is_empty() {
            return Err(Error::TreeMismatch(format!("checkpoint has no `{prefix}` parameters")));
        }
        Ok(out)
    }

    pub fn from_pretrain(meta: CheckpointMeta, state: &PretrainState, dtype: DType) -> Self {
        let mut ck = Checkpoint { meta, records: Vec::new() };
        ck.meta.kind = CheckpointKind::Pretrain;
        ck.meta.step = state.step;
        ck.meta.optimizer_step = state.optimizer.step;
        ck.meta.scheduler = state.scheduler;
        ck.meta.plateau_window = state.window.clone();
        ck.meta.backbone_hash = backbone_hash(&state.teacher);
        ck.add_store("student", &state.student, dtype);
        ck.add_store("teacher", &state.teacher, dtype);
        let mut m1 = ParamStore::new();
        let mut m2 = ParamStore::new();
        for (name, (m, v)) in &state.optimizer.moments {
            m1.insert(name.clone(), m.clone()).expect("unique names");
            m2.insert(name.clone(), v.clone()).expect("unique names");
        }
        if !m1.is_empty() {
            ck.add_store("adam_m", &m1, dtype);
            ck.add_store("adam_v", &m2, dtype);
        }
        ck
    }

    pub fn pretrain_state(&self) -> Result<PretrainState> {
        if self.meta.kind != CheckpointKind::Pretrain {
            return Err(Error::Config("not a pretraining checkpoint".into()));
        }
        let student = self.store("student")?;
        let teacher = self.store("teacher")?;
        let mut optimizer = OptimizerState::new(self.meta.config.optim.adamw());
        optimizer.step = self.meta.optimizer_step;
        if self.meta.optimizer_step > 0 {
            let m1 = self.store("adam_m")?;
            let m2 = self.store("adam_v")?;
            for p in m1.iter() {
                let v = m2.by_name(&p.name)?;
                optimizer.moments.insert(p.name.clone(), (p.value.clone(), v.value.clone()));
            }
        }
        Ok(PretrainState {
            student,
            teacher,
            optimizer,
            scheduler: self.meta.scheduler,
            step: self.meta.step,
            window: self.meta.plateau_window.clone(),
        })
    }

    /// Backbone weights for downstream use: the teacher of a pretraining
    /// checkpoint or the backbone of an adapted model.
    pub fn backbone(&self) -> Result<ParamStore> {
        match self.meta.kind {
            CheckpointKind::Pretrain => self.store("teacher"),
            CheckpointKind::Adapt => Ok(self.store("model")?.subset(is_backbone)),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for r in &self.records {
            let shape = r.value.shape();
            if shape.len() > u8::MAX as usize {
                return Err(Error::Config(format!("record `{}` has rank {}", r.name, shape.len())));
            }
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dtype.code());
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match r.dtype {
                DType::F32 => r.value.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                DType::F64 => r.value.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptHeader { path: path.to_path_buf(), reason };
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format { path: path.to_path_buf(), reason: "not a checkpoint (bad magic)".into() });
        }
        let mut r = Reader { bytes, pos: 8 };
        let version = u32::from_le_bytes(r.take(4).ok_or_else(|| corrupt("truncated version".into()))?.try_into().expect("4"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format { path: path.to_path_buf(), reason: format!("unsupported version {version}") });
        }
        let mlen = r.u64().ok_or_else(|| corrupt("truncated metadata length".into()))? as usize;
        let meta_bytes = r.take(mlen).ok_or_else(|| corrupt("truncated metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes).map_err(|e| corrupt(format!("metadata: {e}")))?;
        let mut records = Vec::new();
        while r.pos < bytes.len() {
            let trunc = || corrupt(format!("truncated record {}", records.len()));
            let nlen = u32::from_le_bytes(r.take(4).ok_or_else(trunc)?.try_into().expect("4")) as usize;
            let name = String::from_utf8(r.take(nlen).ok_or_else(trunc)?.to_vec()).map_err(|e| corrupt(e.to_string()))?;
            let dtype = r.take(1).ok_or_else(trunc)?[0];
            let dtype = DType::from_code(dtype).ok_or_else(|| corrupt(format!("record `{name}` has dtype code {dtype}")))?;
            let rank = r.take(1).ok_or_else(trunc)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(trunc)? as usize);
            }
            let n: usize = shape.iter().product();
            let width = if dtype == DType::F32 { 4 } else { 8 };
            let raw = r.take(n.checked_mul(width).ok_or_else(trunc)?).ok_or_else(trunc)?;
            let data: Vec<f64> = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
            };
            records.push(Record { name, dtype, value: Tensor::new(shape, data)? });
        }
        Ok(Checkpoint { meta, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8")))
    }
}
