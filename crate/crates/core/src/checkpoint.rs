//! Binary model file: magic, version, JSON header, named f32 tensors, and a
//! trailing checksum over everything before it.
//!
//! ```text
//! "CMCK" | u32 version | u32 header_len | header JSON
//! u32 tensor_count | { u32 name_len | name | u32 ndim | u32 dims.. | f32 data.. }*
//! u64 checksum (first 8 bytes of SHA-256 of all preceding bytes)
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{DenoiserModel, Normalizer};
use crate::diffusion::{make_schedule, DiffusionSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::motion::Layout;
use crate::nn::{Hyper, Transformer};

pub const MAGIC: &[u8; 4] = b"CMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    layout: Layout,
    hyper: Hyper,
    history: usize,
    horizon: usize,
    max_level: usize,
    schedule: ScheduleKind,
    normalizer: Normalizer,
    /// Echo of the training configuration; opaque to loading.
    train: serde_json::Value,
}

pub fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn encode(model: &DenoiserModel, sched: &DiffusionSchedule, train: serde_json::Value) -> Result<Vec<u8>> {
    use crate::denoiser::Denoiser;
    if sched.max_level() != model.max_level() {
        return Err(Error::ShapeMismatch(format!(
            "schedule has K = {}, model was built for K = {}",
            sched.max_level(),
            model.max_level()
        )));
    }
    let header = Header {
        layout: model.layout(),
        hyper: *model.hyper(),
        history: model.history(),
        horizon: model.horizon(),
        max_level: sched.max_level(),
        schedule: sched.kind(),
        normalizer: model.normalizer().clone(),
        train,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let net = model.net();
    let mut out = Vec::with_capacity(64 + json.len() + 4 * net.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(net.entries().len() as u32).to_le_bytes());
    for e in net.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &net.params[e.offset..e.offset + e.len()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptModel(format!("unexpected end of payload at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint image. Version is checked before the checksum so a
/// newer file reports its version rather than a checksum failure.
pub fn decode(bytes: &[u8]) -> Result<(DenoiserModel, DiffusionSchedule, serde_json::Value)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checksum("missing magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnknownVersion(version));
    }
    if bytes.len() < 16 {
        return Err(Error::Checksum("file too short".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let actual = checksum(payload);
    if stored != actual {
        return Err(Error::Checksum(format!("stored {stored:016x}, computed {actual:016x}")));
    }
    let mut r = Reader { buf: payload, pos: 8 };
    let hlen = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::CorruptModel(format!("header: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::CorruptModel("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = r
            .take(4 * len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }
    if r.pos != payload.len() {
        return Err(Error::CorruptModel(format!("{} trailing bytes", payload.len() - r.pos)));
    }
    let sched = make_schedule(header.max_level, header.schedule)?;
    let net = Transformer::from_tensors(header.hyper, tensors).map_err(Error::ShapeMismatch)?;
    let model = DenoiserModel::from_net(
        net,
        header.layout,
        header.history,
        header.horizon,
        header.max_level,
        header.normalizer,
    )?;
    Ok((model, sched, header.train))
}

pub fn save_checkpoint(model: &DenoiserModel, sched: &DiffusionSchedule, train: serde_json::Value, path: &Path) -> Result<()> {
    let bytes = encode(model, sched, train)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(DenoiserModel, DiffusionSchedule, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
