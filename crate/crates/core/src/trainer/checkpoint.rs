//! Binary checkpoint format.
//!
//! ```text
//! "MAOS" | version: u16 | count: u32
//! count x { name_len: u16 | name | dtype: u8 | rank: u8 | dims: u64 x rank | offset: u64 }
//! payload (little endian; offsets are relative to its start)
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = raw bytes. The run metadata (config,
//! random streams, sampler position, iteration) is a JSON byte tensor named
//! `meta.json`.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{net_prefix, AdamState, NetId, Trainer, TrainingConfig, ALL_NETS};
use crate::data::{CropSpec, EpochSampler};
use crate::error::{Error, Result};
use crate::model::GeneratorNet;
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MAOS";
pub const CHECKPOINT_VERSION: u16 = 1;
const META_NAME: &str = "meta.json";
const DTYPE_BYTES: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Bytes(Vec<u8>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => DType::F32.code(),
            TensorData::F64(_) => DType::F64.code(),
            TensorData::Bytes(_) => DTYPE_BYTES,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::Bytes(v) => v.len(),
        }
    }

    fn from_slice<T: Scalar>(data: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(data.iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => TensorData::F64(data.iter().map(|v| v.as_f64()).collect()),
        }
    }

    /// Values converted to `T`; exact when the stored width is not wider.
    pub fn to_vec<T: Scalar>(&self, name: &str) -> Result<Vec<T>> {
        match self {
            TensorData::F32(v) => Ok(v.iter().map(|&x| T::lit(f64::from(x))).collect()),
            TensorData::F64(v) => Ok(v.iter().map(|&x| T::lit(x)).collect()),
            TensorData::Bytes(_) => Err(Error::Config(format!("checkpoint tensor `{name}` holds bytes, not floats"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub config: TrainingConfig,
    pub data_rng: ChaCha8Rng,
    pub crop_rng: ChaCha8Rng,
    pub sampler: EpochSampler,
    pub adam_steps: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<StoredTensor>,
}

fn push_store<T: Scalar>(out: &mut Vec<StoredTensor>, prefix: &str, store: &ParamStore<T>) {
    for (name, t) in store.iter() {
        out.push(StoredTensor { name: format!("{prefix}/{name}"), shape: t.shape().to_vec(), data: TensorData::from_slice(t.data()) });
    }
}

fn fill_store<T: Scalar>(ckpt: &Checkpoint, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let key = format!("{prefix}/{name}");
        let data = ckpt.tensor(&key)?.data.to_vec(&key)?;
        store.set_data(&name, data)?;
    }
    Ok(())
}

impl Checkpoint {
    /// Full training state at the trainer's precision.
    pub fn from_trainer<T: Scalar>(tr: &Trainer<T>) -> Result<Self> {
        let mut tensors = Vec::new();
        for (i, &net) in ALL_NETS.iter().enumerate() {
            let store = tr.store(net);
            push_store(&mut tensors, net_prefix(net), store);
            for ((name, t), (m, v)) in store.iter().zip(tr.adam[i].m.iter().zip(&tr.adam[i].v)) {
                let prefix = format!("adam/{}/{name}", net_prefix(net));
                tensors.push(StoredTensor { name: format!("{prefix}/m"), shape: t.shape().to_vec(), data: TensorData::from_slice(m) });
                tensors.push(StoredTensor { name: format!("{prefix}/v"), shape: t.shape().to_vec(), data: TensorData::from_slice(v) });
            }
        }
        let meta = CheckpointMeta {
            iteration: tr.iteration,
            config: tr.cfg.clone(),
            data_rng: tr.data_rng.clone(),
            crop_rng: tr.crop.rng.clone(),
            sampler: tr.sampler.clone(),
            adam_steps: tr.adam.iter().map(|a| a.step).collect(),
        };
        Ok(Checkpoint { meta, tensors })
    }

    pub fn tensor(&self, name: &str) -> Result<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| Error::MissingKey(name.to_string()))
    }

    /// Restores a trainer that continues exactly where this one stopped.
    pub fn into_trainer<T: Scalar>(self) -> Result<Trainer<T>> {
        let meta = &self.meta;
        let mut tr = Trainer::<T>::new(meta.config.clone(), meta.sampler.order.len())?;
        if meta.adam_steps.len() != ALL_NETS.len() {
            return Err(Error::Config(format!("checkpoint lists {} optimizer states, expected {}", meta.adam_steps.len(), ALL_NETS.len())));
        }
        for (i, &net) in ALL_NETS.iter().enumerate() {
            fill_store(&self, net_prefix(net), tr.store_mut(net))?;
            let names: Vec<String> = tr.store(net).iter().map(|(n, _)| n.to_string()).collect();
            let mut state = AdamState::new(tr.store(net));
            for (j, name) in names.iter().enumerate() {
                let prefix = format!("adam/{}/{name}", net_prefix(net));
                state.m[j] = self.tensor(&format!("{prefix}/m"))?.data.to_vec(&prefix)?;
                state.v[j] = self.tensor(&format!("{prefix}/v"))?.data.to_vec(&prefix)?;
                if state.m[j].len() != tr.store(net).iter().nth(j).map_or(0, |(_, t)| t.numel()) {
                    return Err(Error::shape("load_checkpoint", prefix, "parameter size", state.m[j].len()));
                }
            }
            state.step = meta.adam_steps[i];
            tr.adam[i] = state;
        }
        tr.data_rng = meta.data_rng.clone();
        tr.crop = CropSpec { part_size: meta.config.part_size, rng: meta.crop_rng.clone() };
        tr.sampler = meta.sampler.clone();
        tr.iteration = meta.iteration;
        Ok(tr)
    }

    /// One generator (`NetId::F` or `NetId::G`) with the stored weights.
    pub fn generator<T: Scalar>(&self, which: NetId) -> Result<GeneratorNet<T>> {
        let cfg = &self.meta.config;
        let mut net = crate::model::build_generator(cfg.g_base_width, cfg.g_res_blocks, 0)?;
        fill_store(self, net_prefix(which), &mut net.params)?;
        Ok(net)
    }

    /// Copy with every float tensor narrowed to f32, for inference export.
    pub fn compact(&self) -> Checkpoint {
        let tensors = self
            .tensors
            .iter()
            .map(|t| StoredTensor {
                data: match &t.data {
                    TensorData::F64(v) => TensorData::F32(v.iter().map(|&x| x as f32).collect()),
                    other => other.clone(),
                },
                ..t.clone()
            })
            .collect();
        Checkpoint { meta: self.meta.clone(), tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = StoredTensor { name: META_NAME.into(), shape: Vec::new(), data: TensorData::Bytes(serde_json::to_vec(&self.meta)?) };
        let all: Vec<&StoredTensor> = std::iter::once(&meta).chain(&self.tensors).collect();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(all.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in &all {
            let shape = if matches!(t.data, TensorData::Bytes(_)) { vec![t.data.len()] } else { t.shape.clone() };
            if shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::shape("save_checkpoint", t.name.clone(), t.data.len(), format!("{shape:?}")));
            }
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.code());
            out.push(shape.len() as u8);
            for d in &shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += payload_len(&t.data) as u64;
        }
        for t in &all {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::Bytes(v) => out.extend_from_slice(v),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0, path };
        if bytes.len() >= 4 && &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt { path: path.to_path_buf(), detail: "bad magic bytes (expected MAOS)".into() });
        }
        r.take(4)?;
        let version = u16::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.corrupt("tensor name is not UTF-8"))?;
            let [dtype, rank] = r.array()?;
            let shape = (0..rank).map(|_| r.array().map(|b| u64::from_le_bytes(b) as usize)).collect::<Result<Vec<_>>>()?;
            let offset = u64::from_le_bytes(r.array()?) as usize;
            table.push((name, dtype, shape, offset));
        }
        let payload = &bytes[r.pos..];
        let mut tensors = Vec::with_capacity(table.len());
        let mut expected_offset = 0usize;
        for (name, dtype, shape, offset) in table {
            let n: usize = shape.iter().product();
            let width = match dtype {
                0 => 4,
                1 => 8,
                DTYPE_BYTES => 1,
                d => return Err(r.corrupt(&format!("unknown dtype {d} for `{name}`"))),
            };
            if offset != expected_offset {
                return Err(r.corrupt(&format!("offset of `{name}` is {offset}, expected {expected_offset}")));
            }
            let raw = payload.get(offset..offset + n * width).ok_or_else(|| Error::Truncated(path.to_path_buf()))?;
            expected_offset += n * width;
            let data = match dtype {
                0 => TensorData::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect()),
                1 => TensorData::F64(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect()),
                _ => TensorData::Bytes(raw.to_vec()),
            };
            tensors.push(StoredTensor { name, shape, data });
        }
        if payload.len() != expected_offset {
            return Err(r.corrupt(&format!("{} trailing bytes after payload", payload.len().saturating_sub(expected_offset))));
        }
        let meta_idx = tensors.iter().position(|t| t.name == META_NAME).ok_or_else(|| Error::MissingKey(META_NAME.into()))?;
        let meta_t = tensors.remove(meta_idx);
        let TensorData::Bytes(json) = meta_t.data else { return Err(r.corrupt("meta.json must be a byte tensor")) };
        let meta = serde_json::from_slice(&json)?;
        Ok(Checkpoint { meta, tensors })
    }
}

fn payload_len(d: &TensorData) -> usize {
    match d {
        TensorData::F32(v) => v.len() * 4,
        TensorData::F64(v) => v.len() * 8,
        TensorData::Bytes(v) => v.len(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| Error::Truncated(self.path.to_path_buf()))?;
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn corrupt(&self, detail: &str) -> Error {
        Error::Corrupt { path: self.path.to_path_buf(), detail: detail.to_string() }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
