//! `PGLCKPT1` tensor files.
//!
//! Layout: the 8 magic bytes, a `u32` entry count, then per entry a manifest
//! record (`u32` name length, name bytes, `u8` dtype code, `u32` rank, `u64`
//! dims), followed by every entry's raw little-endian values in manifest
//! order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::networks::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};

pub const CKPT_MAGIC: &[u8; 8] = b"PGLCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub enum Blob {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

impl Blob {
    fn dtype(&self) -> DType {
        match self {
            Blob::F32(_) => DType::F32,
            Blob::F64(_) => DType::F64,
            Blob::U64 { .. } => DType::U64,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Blob::F32(t) => t.shape(),
            Blob::F64(t) => t.shape(),
            Blob::U64 { shape, .. } => shape,
        }
    }

    pub fn u64s(values: &[u64]) -> Self {
        Blob::U64 {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }
}

pub fn encode_entries(entries: &[(String, Blob)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, blob) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(blob.dtype() as u8);
        out.extend_from_slice(&(blob.shape().len() as u32).to_le_bytes());
        for &d in blob.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, blob) in entries {
        match blob {
            Blob::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            Blob::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            Blob::U64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            expected: self.pos.saturating_add(n),
            actual: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_values<T: Scalar>(r: &mut Reader, shape: Vec<usize>, count: usize) -> Result<Tensor<T>> {
    let raw = r.take(count * T::DTYPE.size())?;
    let data = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn decode_entries(bytes: &[u8]) -> Result<Vec<(String, Blob)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic, expected \"PGLCKPT1\"".into()));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("checkpoint entry name is not UTF-8".into()))?
            .to_string();
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("`{name}`: unknown dtype code {code}")))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Format(format!("`{name}`: dims {shape:?} overflow")))?;
        manifest.push((name, dtype, shape, numel));
    }
    let mut entries = Vec::with_capacity(manifest.len());
    for (name, dtype, shape, numel) in manifest {
        let blob = match dtype {
            DType::F32 => Blob::F32(read_values(&mut r, shape, numel)?),
            DType::F64 => Blob::F64(read_values(&mut r, shape, numel)?),
            DType::U64 => {
                let mut data = Vec::with_capacity(numel);
                for _ in 0..numel {
                    data.push(r.u64()?);
                }
                Blob::U64 { shape, data }
            }
        };
        entries.push((name, blob));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
    }
    Ok(entries)
}

/// Write via a temporary sibling and rename, so readers never see a partial file.
pub fn write_entries(path: &Path, entries: &[(String, Blob)]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_entries(entries)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_entries(path: &Path) -> Result<Vec<(String, Blob)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_entries(&bytes)
}

pub fn store_entries(prefix: &str, store: &ParamStore<f32>) -> Vec<(String, Blob)> {
    store
        .iter()
        .map(|(k, p)| (format!("{prefix}{k}"), Blob::F32(p.value.clone())))
        .collect()
}

/// Fill `template` from the `prefix` entries; key sets and shapes must match.
pub fn restore_store(entries: &[(String, Blob)], prefix: &str, template: &ParamStore<f32>) -> Result<ParamStore<f32>> {
    let found: BTreeMap<&str, &Blob> = entries
        .iter()
        .filter_map(|(k, b)| k.strip_prefix(prefix).map(|n| (n, b)))
        .collect();
    let mut problems = Vec::new();
    let mut out = template.clone();
    for (name, p) in out.iter_mut() {
        match found.get(name) {
            Some(Blob::F32(t)) if t.shape() == p.value.shape() => p.value = t.clone(),
            Some(Blob::F32(t)) => problems.push(format!(
                "`{prefix}{name}` shape {:?}, expected {:?}",
                t.shape(),
                p.value.shape()
            )),
            Some(_) => problems.push(format!("`{prefix}{name}` is not f32")),
            None => problems.push(format!("missing `{prefix}{name}`")),
        }
    }
    for name in found.keys() {
        if !template.contains(name) {
            problems.push(format!("unexpected `{prefix}{name}`"));
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::KeyMismatch(problems))
    }
}

pub fn restore_buffers(entries: &[(String, Blob)], prefix: &str) -> BTreeMap<String, Tensor<f32>> {
    entries
        .iter()
        .filter_map(|(k, b)| match (k.strip_prefix(prefix), b) {
            (Some(n), Blob::F32(t)) => Some((n.to_string(), t.clone())),
            _ => None,
        })
        .collect()
}

pub fn find_u64s<'a>(entries: &'a [(String, Blob)], name: &str) -> Result<&'a [u64]> {
    match entries.iter().find(|(k, _)| k == name) {
        Some((_, Blob::U64 { data, .. })) => Ok(data),
        Some(_) => Err(Error::Format(format!("`{name}` is not u64"))),
        None => Err(Error::KeyMismatch(vec![format!("missing `{name}`")])),
    }
}

/// Complete pretraining state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub online: ParamStore<f32>,
    pub target: ParamStore<f32>,
    pub opt: BTreeMap<String, Tensor<f32>>,
    pub step: u64,
    pub rng: [u64; 7],
}

impl Checkpoint {
    pub fn entries(&self) -> Vec<(String, Blob)> {
        let mut e = store_entries("online/", &self.online);
        e.extend(store_entries("target/", &self.target));
        e.extend(self.opt.iter().map(|(k, v)| (format!("opt/{k}"), Blob::F32(v.clone()))));
        e.push(("meta/step".into(), Blob::u64s(&[self.step])));
        e.push(("meta/rng".into(), Blob::u64s(&self.rng)));
        e
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_entries(path, &self.entries())
    }

    /// Load into stores shaped like the templates (roles come from them).
    pub fn load(path: &Path, online: &ParamStore<f32>, target: &ParamStore<f32>) -> Result<Self> {
        let entries = read_entries(path)?;
        let rng: [u64; 7] = find_u64s(&entries, "meta/rng")?
            .try_into()
            .map_err(|_| Error::Format("meta/rng must hold 7 words".into()))?;
        Ok(Checkpoint {
            online: restore_store(&entries, "online/", online)?,
            target: restore_store(&entries, "target/", target)?,
            opt: restore_buffers(&entries, "opt/"),
            step: *find_u64s(&entries, "meta/step")?
                .first()
                .ok_or_else(|| Error::Format("empty meta/step".into()))?,
            rng,
        })
    }
}
