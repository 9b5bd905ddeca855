//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "CAPSGAN\0"
//! version    u32
//! total_len  u64      length of the whole file including the checksum
//! config     u64 length + canonical JSON of the GanConfig
//! iteration  u64
//! g_step     u64      generator optimizer step count
//! d_step     u64
//! buffers    u32 count, then per buffer:
//!              u32 name length + UTF-8 name,
//!              u32 ndim + u64 dims,
//!              u64 element count + f64 values
//! crc32      u32      over every preceding byte
//! ```
//!
//! Buffer names are `generator/<param>`, `generator.m/<param>`,
//! `generator.v/<param>` and the same for `discriminator`.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;

use super::config::{GanConfig, Variant};
use super::model::{GanModel, ParamSet};
use super::GanError;

const MAGIC: &[u8; 8] = b"CAPSGAN\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint holds a {found} discriminator but a {expected} one was requested")]
    VariantMismatch { expected: Variant, found: Variant },
    #[error("checkpoint configuration differs from the requested configuration")]
    ConfigMismatch,
    #[error(transparent)]
    Model(#[from] GanError),
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_buffer(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.ndim() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    put_u64(out, t.len() as u64);
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn buffers(model: &GanModel) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (role, set, opt) in [
        ("generator", &model.generator, &model.g_opt),
        ("discriminator", &model.discriminator, &model.d_opt),
    ] {
        for (i, (name, t)) in set.iter().enumerate() {
            out.push((format!("{role}/{name}"), t));
            out.push((format!("{role}.m/{name}"), &opt.m[i]));
            out.push((format!("{role}.v/{name}"), &opt.v[i]));
        }
    }
    out
}

/// Serialize `model` to bytes.
pub fn encode(model: &GanModel) -> Vec<u8> {
    let config = serde_json::to_vec(&model.config).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u64(&mut out, 0); // patched below
    put_u64(&mut out, config.len() as u64);
    out.extend_from_slice(&config);
    put_u64(&mut out, model.iteration);
    put_u64(&mut out, model.g_opt.step);
    put_u64(&mut out, model.d_opt.step);
    let bufs = buffers(model);
    put_u32(&mut out, bufs.len() as u32);
    for (name, t) in &bufs {
        put_buffer(&mut out, name, t);
    }
    let total = (out.len() + 4) as u64;
    out[12..20].copy_from_slice(&total.to_le_bytes());
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            CheckpointError::Malformed(format!("field at byte {} overruns the payload", self.pos))
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

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?)
            .map_err(|_| CheckpointError::Malformed("length overflows usize".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let nlen = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(nlen)?)
            .map_err(|_| CheckpointError::Malformed("buffer name is not UTF-8".into()))?
            .to_string();
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(self.len()?);
        }
        let count = self.len()?;
        let raw = self.take(
            count
                .checked_mul(8)
                .ok_or_else(|| CheckpointError::Malformed("buffer too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("buffer {name}: {e}")))?;
        Ok((name, t))
    }
}

/// Parse bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<GanModel> {
    if bytes.len() < MAGIC.len() {
        return Err(CheckpointError::Truncated {
            expected: HEADER,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER {
        return Err(CheckpointError::Truncated {
            expected: HEADER,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let total = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let total = usize::try_from(total).unwrap_or(usize::MAX);
    if bytes.len() < total || total < HEADER + 4 {
        return Err(CheckpointError::Truncated {
            expected: total,
            found: bytes.len(),
        });
    }
    if bytes.len() > total {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - total
        )));
    }
    let (body, tail) = bytes.split_at(total - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }

    let mut r = Reader {
        bytes: body,
        pos: HEADER,
    };
    let clen = r.len()?;
    let config: GanConfig = serde_json::from_slice(r.take(clen)?)
        .map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
    let iteration = r.u64()?;
    let g_step = r.u64()?;
    let d_step = r.u64()?;
    let count = r.u32()? as usize;
    let mut stored_bufs = std::collections::HashMap::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if stored_bufs.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Malformed(format!(
                "duplicate buffer {name}"
            )));
        }
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(
            "unread bytes after the last buffer".into(),
        ));
    }

    let mut model = GanModel::new(config)?;
    model.iteration = iteration;
    model.g_opt.step = g_step;
    model.d_opt.step = d_step;
    let mut fill =
        |role: &str, set: &mut ParamSet, m: &mut [Tensor], v: &mut [Tensor]| -> Result<()> {
            let names: Vec<String> = set.names().to_vec();
            for (i, name) in names.iter().enumerate() {
                for (prefix, slot) in [
                    (role.to_string(), &mut set.tensors_mut()[i]),
                    (format!("{role}.m"), &mut m[i]),
                    (format!("{role}.v"), &mut v[i]),
                ] {
                    let key = format!("{prefix}/{name}");
                    let t = stored_bufs.remove(&key).ok_or_else(|| {
                        CheckpointError::Malformed(format!("missing buffer {key}"))
                    })?;
                    if t.shape() != slot.shape() {
                        return Err(CheckpointError::Malformed(format!(
                            "buffer {key} has shape {:?}, expected {:?}",
                            t.shape(),
                            slot.shape()
                        )));
                    }
                    *slot = t;
                }
            }
            Ok(())
        };
    fill(
        "generator",
        &mut model.generator,
        &mut model.g_opt.m,
        &mut model.g_opt.v,
    )?;
    fill(
        "discriminator",
        &mut model.discriminator,
        &mut model.d_opt.m,
        &mut model.d_opt.v,
    )?;
    if let Some(extra) = stored_bufs.keys().next() {
        return Err(CheckpointError::Malformed(format!(
            "unexpected buffer {extra}"
        )));
    }
    Ok(model)
}

/// Write `model` to `path` (via a sibling temporary file and a rename).
pub fn save_checkpoint(model: &GanModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(model)).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<GanModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

/// Load a checkpoint that must have been written for `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &GanConfig) -> Result<GanModel> {
    let model = load_checkpoint(path)?;
    if model.config.variant() != expected.variant() {
        return Err(CheckpointError::VariantMismatch {
            expected: expected.variant(),
            found: model.config.variant(),
        });
    }
    if &model.config != expected {
        return Err(CheckpointError::ConfigMismatch);
    }
    Ok(model)
}
