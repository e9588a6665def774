//! Binary checkpoint format.
//!
//! ```text
//! "NITC" | version u16 | config_len u32 | config (UTF-8 key=value lines)
//! param_count u32
//! repeated: name_len u16 | name | ndim u8 | dims u32 × ndim | f32 data
//! ```
//!
//! Integers and floats are little-endian. Keys prefixed `model.` describe the
//! architecture; any other keys are carried through untouched.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::blocks::{NitConfig, NitParams};
use crate::error::{NitError, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"NITC";
pub const VERSION: u16 = 1;

/// Serializes a model plus extra metadata.
pub fn encode<T: Scalar>(params: &NitParams<T>, extra: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut kv = params.config.to_kv();
    for (k, v) in extra {
        if k.starts_with("model.") {
            return Err(NitError::Config(format!("extra key {k} collides with the model namespace")));
        }
        kv.insert(k.clone(), v.clone());
    }
    let mut config = String::new();
    for (k, v) in &kv {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(NitError::Config(format!("unencodable config entry {k}")));
        }
        config.push_str(&format!("{k}={v}\n"));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    let tensors = params.tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.ndim() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.iter() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NitError::Format(format!("truncated checkpoint at byte {}", self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| NitError::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Inverse of [`encode`]: the model and the non-model metadata.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(NitParams<T>, BTreeMap<String, String>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NitError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(NitError::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| NitError::Format("config block is not UTF-8".into()))?;
    let mut kv = parse_kv(text)?;
    let config = NitConfig::from_kv(&kv)?;
    kv.retain(|k, _| !k.starts_with("model."));
    let mut params = NitParams::<T>::zeros(config)?;

    let count = r.u32()? as usize;
    let mut tensors = params.tensors_mut();
    if count != tensors.len() {
        return Err(NitError::Format(format!("checkpoint holds {count} tensors, model expects {}", tensors.len())));
    }
    for (expected, t) in tensors.iter_mut() {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| NitError::Format("tensor name is not UTF-8".into()))?;
        if name != expected {
            return Err(NitError::Format(format!("expected tensor {expected}, found {name}")));
        }
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        if dims != t.shape() {
            return Err(NitError::Format(format!("tensor {name} has shape {dims:?}, expected {:?}", t.shape())));
        }
        for v in t.iter_mut() {
            let raw = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
            *v = T::of(raw as f64);
        }
    }
    drop(tensors);
    if r.pos != bytes.len() {
        return Err(NitError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((params, kv))
}

/// Writes atomically through a sibling temp file.
pub fn save<T: Scalar>(path: &Path, params: &NitParams<T>, extra: &BTreeMap<String, String>) -> Result<()> {
    let bytes = encode(params, extra)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(NitParams<T>, BTreeMap<String, String>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
