//! Binary checkpoint format.
//!
//! `TABCKPT1`, `u32` tensor count, then per tensor: `u16` name length, UTF-8
//! name, `u8` rank, `rank × u32` dims, `f32` LE payload. A trailing `u32` holds
//! the CRC32 of all payload bytes concatenated in file order. The model config
//! travels as a rank-1 tensor `meta.config` whose values are the bytes of its
//! JSON encoding.

use std::fs;
use std::path::Path;

use crate::error::{Result, TabError};
use crate::model::{ModelConfig, TabModel};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TABCKPT1";
const CONFIG_TENSOR: &str = "meta.config";

struct Entry {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn entries<T: Scalar>(model: &TabModel<T>) -> Result<Vec<Entry>> {
    let json = serde_json::to_vec(&model.config)?;
    let mut out = vec![Entry {
        name: CONFIG_TENSOR.into(),
        dims: vec![json.len()],
        data: json.iter().map(|&b| b as f32).collect(),
    }];
    for (_, name, t) in model.store.iter() {
        out.push(Entry {
            name: name.to_string(),
            dims: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        });
    }
    Ok(out)
}

pub fn encode_checkpoint<T: Scalar>(model: &TabModel<T>) -> Result<Vec<u8>> {
    let entries = entries(model)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut crc = crc32fast::Hasher::new();
    for e in &entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| TabError::Parameter(format!("tensor name too long: {}", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.dims.len() as u8);
        for &d in &e.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let start = out.len();
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        crc.update(&out[start..]);
    }
    out.extend_from_slice(&crc.finalize().to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| TabError::Format {
            offset: self.pos as u64,
            msg: format!("truncated checkpoint: {what}"),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn format_err(offset: usize, msg: impl Into<String>) -> TabError {
    TabError::Format { offset: offset as u64, msg: msg.into() }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<TabModel<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(format_err(0, "bad checkpoint magic"));
    }
    let count = r.u32("tensor count")? as usize;
    let mut crc = crc32fast::Hasher::new();
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let at = r.pos;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| format_err(at + 2, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel.ok_or_else(|| format_err(r.pos, "tensor too large"))?;
        let payload = r.take(numel * 4, "payload")?;
        crc.update(payload);
        let data: Vec<f32> = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.push((at, name, dims, data));
    }
    let crc_at = r.pos;
    let stored = r.u32("crc")?;
    if r.pos != bytes.len() {
        return Err(format_err(r.pos, "trailing bytes after checkpoint"));
    }
    if stored != crc.finalize() {
        return Err(format_err(crc_at, "checkpoint CRC mismatch"));
    }

    let (cfg_at, _, _, cfg_data) = tensors
        .iter()
        .find(|t| t.1 == CONFIG_TENSOR)
        .ok_or_else(|| format_err(12, "checkpoint has no meta.config tensor"))?;
    let cfg_bytes: Vec<u8> = cfg_data.iter().map(|&v| v as u8).collect();
    let config: ModelConfig =
        serde_json::from_slice(&cfg_bytes).map_err(|e| format_err(*cfg_at, format!("bad config: {e}")))?;
    let mut model = TabModel::<T>::new(config, 0)?;
    let mut seen = vec![false; model.store.len()];
    for (at, name, dims, data) in tensors {
        if name == CONFIG_TENSOR {
            continue;
        }
        let id = model.store.id(&name).ok_or_else(|| format_err(at, format!("unknown tensor {name}")))?;
        if model.store.get(id).shape() != dims.as_slice() {
            return Err(format_err(at, format!("tensor {name} has shape {dims:?}, expected {:?}", model.store.get(id).shape())));
        }
        let dst = model.store.get_mut(id).data_mut();
        for (d, s) in dst.iter_mut().zip(&data) {
            *d = T::of(*s as f64);
        }
        seen[id.index()] = true;
    }
    if let Some(missing) = model.store.ids().find(|id| !seen[id.index()]) {
        return Err(format_err(crc_at, format!("missing tensor {}", model.store.name(missing))));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &TabModel<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TabModel<T>> {
    decode_checkpoint(&fs::read(path)?)
}

/// CRC32 of the parameter payload as it would be written, in hex.
pub fn checkpoint_hash<T: Scalar>(model: &TabModel<T>) -> Result<String> {
    let bytes = encode_checkpoint(model)?;
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    Ok(format!("{crc:08x}"))
}
