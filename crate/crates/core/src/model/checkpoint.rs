//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SCAK"  u32 version
//! u32 config_len, config as TOML (UTF-8)
//! u32 tensor_count
//! per tensor: u16 name_len, name, u8 ndim, ndim x u32 dims, f64 values
//! ```
//!
//! Tensors appear in the model's fixed visiting order and are matched back
//! by name and shape on load. Values are stored as f64 regardless of the
//! in-memory precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCAK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Checkpoint { path: path.to_path_buf(), reason })
}

fn encode<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let config = toml::to_string(&model.config).map_err(|e| Error::config(e.to_string()))?;
    let tensors = model.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.tensor.ndim() as u8);
        for &d in t.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.tensor.data() {
            out.extend_from_slice(&v.to_f64().to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format!("truncated: needed {n} bytes at offset {}, file has {}", self.pos, self.buf.len())
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode<T: Real>(bytes: &[u8]) -> Result<Model<T>, String> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(format!("bad magic {magic:?} at offset 0, expected {CHECKPOINT_MAGIC:?}"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let len = c.u32()? as usize;
    let text = std::str::from_utf8(c.take(len)?).map_err(|e| format!("config is not UTF-8: {e}"))?;
    let config: ModelConfig = toml::from_str(text).map_err(|e| format!("config: {e}"))?;
    let mut model = Model::<T>::new(config).map_err(|e| e.to_string())?;

    let count = c.u32()? as usize;
    let mut slots = model.named_tensors_mut();
    if count != slots.len() {
        return Err(format!("holds {count} tensors, the configured model has {}", slots.len()));
    }
    for slot in slots.iter_mut() {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?).map_err(|e| format!("tensor name: {e}"))?;
        if name != slot.name {
            return Err(format!("expected tensor {}, found {name}", slot.name));
        }
        let ndim = c.u8()? as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if shape != slot.tensor.shape() {
            return Err(format!("tensor {name}: shape {shape:?}, expected {:?}", slot.tensor.shape()));
        }
        let raw = c.take(slot.tensor.len() * 8)?;
        let values = raw.chunks_exact(8).map(|b| T::from_f64(f64::from_le_bytes(b.try_into().unwrap())));
        for (dst, v) in slot.tensor.data_mut().iter_mut().zip(values) {
            *dst = v;
        }
    }
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes after offset {}", bytes.len() - c.pos, c.pos));
    }
    drop(slots);
    Ok(model)
}
