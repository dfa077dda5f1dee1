//! `VMCW` binary container for weights and golden dumps.
//!
//! Layout, all integers little-endian:
//! ```text
//! "VMCW" u32:version
//! u32:meta_count  { u32:len key  u32:len value }*
//! u32:tensor_count { u32:len name  u8:dtype  u8:frozen  u32:rank  u64:extent*  raw values }*
//! ```
//! Entries are kept sorted by name so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ops::BnState;
use crate::params::ParameterStore;
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"VMCW";
pub const VERSION: u32 = 1;

pub const META_CONFIG_HASH: &str = "config_hash";
pub const META_SEED: &str = "seed";
pub const META_KIND: &str = "kind";

/// Prefix of batch-norm running statistics stored next to parameters.
pub const BUFFER_PREFIX: &str = "buffers.";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub dtype: DType,
    pub frozen: bool,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Record>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    /// Inserts a tensor; `F32` records are rounded on write.
    pub fn insert(&mut self, name: &str, tensor: Tensor, dtype: DType, frozen: bool) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::arg("container", format!("duplicate tensor `{name}`")));
        }
        let tensor = if dtype == DType::F32 { tensor.round_to_f32() } else { tensor };
        self.tensors.insert(name.to_string(), Record { dtype, frozen, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(|r| &r.tensor)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, r) in &self.tensors {
            put_str(&mut out, name);
            out.push(r.dtype.code());
            out.push(r.frozen as u8);
            out.extend_from_slice(&(r.tensor.rank() as u32).to_le_bytes());
            for &e in r.tensor.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in r.tensor.data() {
                match r.dtype {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.err("bad magic, not a VMCW container"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let mut c = Container::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            if c.meta.insert(k.clone(), v).is_some() {
                return Err(r.err(&format!("duplicate metadata key `{k}`")));
            }
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| r.err(&format!("`{name}`: unknown dtype")))?;
            let frozen = match r.u8()? {
                0 => false,
                1 => true,
                f => return Err(r.err(&format!("`{name}`: bad frozen flag {f}"))),
            };
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| r.err("extent overflow"))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| r.err(&format!("`{name}`: extent overflow")))?;
            let raw = r.take(
                numel
                    .checked_mul(dtype.size())
                    .ok_or_else(|| r.err(&format!("`{name}`: size overflow")))?,
            )?;
            let data: Vec<f64> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            };
            let tensor = Tensor::new(shape, data).map_err(|e| r.err(&format!("`{name}`: {e}")))?;
            if c.tensors.insert(name.clone(), Record { dtype, frozen, tensor }).is_some() {
                return Err(r.err(&format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }

    /// Parameters plus batch-norm buffers.
    pub fn from_model(params: &ParameterStore, bn: &[BnState], dtype: DType) -> Result<Self> {
        let mut c = Container::new();
        c.set_meta(META_KIND, "weights");
        for (name, p) in params.iter() {
            c.insert(name, p.value.clone(), dtype, p.frozen)?;
        }
        for (i, s) in bn.iter().enumerate() {
            if s.running_mean.is_empty() {
                continue;
            }
            let c_len = s.running_mean.len();
            let base = format!("{BUFFER_PREFIX}assembly.bn{}", i + 1);
            c.insert(
                &format!("{base}.running_mean"),
                Tensor::new(vec![c_len], s.running_mean.clone())?,
                dtype,
                false,
            )?;
            c.insert(
                &format!("{base}.running_var"),
                Tensor::new(vec![c_len], s.running_var.clone())?,
                dtype,
                false,
            )?;
        }
        Ok(c)
    }

    /// Copies every stored tensor into `params`/`bn`. Names and shapes must
    /// match the model exactly; missing parameters are an error.
    pub fn apply_to(&self, params: &mut ParameterStore, bn: &mut [BnState], path: &Path) -> Result<()> {
        let fmt = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        for name in params.names() {
            if !self.tensors.contains_key(name) {
                return Err(fmt(format!("missing tensor `{name}`")));
            }
        }
        for (name, r) in &self.tensors {
            if let Some(rest) = name.strip_prefix(BUFFER_PREFIX) {
                let (idx, field) = parse_buffer(rest).ok_or_else(|| fmt(format!("unknown buffer `{name}`")))?;
                let state = bn.get_mut(idx).ok_or_else(|| fmt(format!("unknown buffer `{name}`")))?;
                let len = state.running_mean.len();
                if r.tensor.shape() != [len] {
                    return Err(fmt(format!("buffer `{name}` has shape {:?}, expected [{len}]", r.tensor.shape())));
                }
                let dst = if field == "running_mean" {
                    &mut state.running_mean
                } else {
                    &mut state.running_var
                };
                dst.copy_from_slice(r.tensor.data());
                continue;
            }
            if name.starts_with("text.") {
                continue;
            }
            match params.get(name) {
                None => return Err(Error::UnknownParameter(name.clone())),
                Some(p) if p.frozen != r.frozen => {
                    return Err(fmt(format!("tensor `{name}` frozen flag mismatch")));
                }
                Some(_) => params.set(name, r.tensor.clone())?,
            }
        }
        Ok(())
    }
}

fn parse_buffer(rest: &str) -> Option<(usize, &str)> {
    let rest = rest.strip_prefix("assembly.bn")?;
    let (idx, field) = rest.split_once('.')?;
    let idx: usize = idx.parse().ok()?;
    if idx == 0 || !matches!(field, "running_mean" | "running_var") {
        return None;
    }
    Some((idx - 1, field))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: format!("{msg} (offset {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }
}

/// Checks two dumps come from the same config, then compares tensors
/// bit-exactly. Returns the names that differ.
pub fn compare_dumps(a: &Container, b: &Container) -> Result<Vec<String>> {
    let (ha, hb) = (a.meta(META_CONFIG_HASH), b.meta(META_CONFIG_HASH));
    if ha.is_none() || ha != hb {
        return Err(Error::Config(format!(
            "dumps come from different configs ({} vs {})",
            ha.unwrap_or("none"),
            hb.unwrap_or("none")
        )));
    }
    let mut diff = Vec::new();
    for name in a.tensors.keys().chain(b.tensors.keys()) {
        let same = matches!((a.get(name), b.get(name)), (Some(x), Some(y)) if x.bit_eq(y));
        if !same && !diff.contains(name) {
            diff.push(name.clone());
        }
    }
    Ok(diff)
}
