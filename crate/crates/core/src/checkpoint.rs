//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "DTOPCKPT"
//! version      u32      1
//! config_len   u32
//! config       config_len bytes of JSON (ModelConfig)
//! entries      u32
//! per entry:
//!   name_len   u32
//!   name       name_len bytes UTF-8
//!   width      u8       4 (f32) or 8 (f64)
//!   ndim       u32
//!   dims       ndim × u64
//!   data       numel × width bytes
//! ```
//!
//! Loading rebuilds the model skeleton from the config and requires every
//! parameter to be present with a matching shape. Values stored at the
//! other precision are converted.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::vit::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"DTOPCKPT";
pub const VERSION: u32 = 1;

pub fn to_bytes<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config =
        serde_json::to_vec(&model.config).map_err(|e| Error::Internal(e.to_string()))?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    let width = std::mem::size_of::<T>() as u8;
    for (name, value) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(width);
        out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in value.data() {
            if width == 4 {
                out.extend_from_slice(&(v.f() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.f().to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(corrupt(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
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
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Parse {
        context: "checkpoint".into(),
        detail: detail.into(),
    }
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let len = c.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(c.take(len)?).map_err(|e| corrupt(e.to_string()))?;
    let mut model = Model::<T>::init(config, 0)?;
    let entries = c.u32()? as usize;
    if entries != model.params.len() {
        return Err(corrupt(format!(
            "{entries} entries, model expects {}",
            model.params.len()
        )));
    }
    let mut seen = vec![false; entries];
    for _ in 0..entries {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|e| corrupt(e.to_string()))?;
        let id = model
            .params
            .find(name)
            .ok_or_else(|| corrupt(format!("unknown parameter `{name}`")))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(corrupt(format!("duplicate parameter `{name}`")));
        }
        let width = c.u8()?;
        let ndim = c.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let target = model.params.get_mut(id);
        if dims != target.shape() {
            return Err(corrupt(format!(
                "`{name}` has shape {dims:?}, expected {:?}",
                target.shape()
            )));
        }
        let numel = target.numel();
        let raw = match width {
            4 | 8 => c.take(numel * width as usize)?,
            w => return Err(corrupt(format!("`{name}` has element width {w}"))),
        };
        for (dst, chunk) in target.data_mut().iter_mut().zip(raw.chunks(width as usize)) {
            *dst = if width == 4 {
                T::c(f32::from_le_bytes(chunk.try_into().unwrap()) as f64)
            } else {
                T::c(f64::from_le_bytes(chunk.try_into().unwrap()))
            };
        }
    }
    if c.pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(model)
}

pub fn save<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Model<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Same shapes and names; used to check a loaded skeleton.
pub fn same_layout<T: Real, U: Real>(a: &Model<T>, b: &Model<U>) -> bool {
    a.config == b.config
        && a.params.len() == b.params.len()
        && a.params
            .iter()
            .zip(b.params.iter())
            .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
}
