//! `CKPT` checkpoint files.
//!
//! Layout, little-endian:
//!
//! ```text
//! "CKPT" | u32 version (1) | u32 meta_len | meta (UTF-8)
//! u32 n_params | per param: u16 name_len, name, u8 ndim, u32 dims[ndim], f32 payload
//! u8 has_adam  | [u64 step | per param: f32 m payload | per param: f32 v payload]
//! u8 has_ema   | [u64 updates | per param: f32 shadow payload]
//! u64 epoch | u64 step | u32 CRC32 of every preceding byte
//! ```
//!
//! Values are stored as `f32`; the trainer keeps its state `f32`-representable
//! so that resuming from a checkpoint continues bit-exactly.

use thiserror::Error;

use super::optim::{AdamState, EmaState, ParamSet};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form metadata, typically the resolved run configuration.
    pub meta: String,
    pub params: ParamSet,
    pub adam: Option<AdamState>,
    pub ema: Option<EmaState>,
    pub epoch: u64,
    pub step: u64,
}

fn put_tensor_payload(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.meta.len() as u32).to_le_bytes());
    out.extend_from_slice(ckpt.meta.as_bytes());
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, t) in ckpt.params.names().iter().zip(ckpt.params.tensors()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_tensor_payload(&mut out, t);
    }
    match &ckpt.adam {
        Some(a) => {
            out.push(1);
            out.extend_from_slice(&a.step.to_le_bytes());
            a.m.tensors().iter().for_each(|t| put_tensor_payload(&mut out, t));
            a.v.tensors().iter().for_each(|t| put_tensor_payload(&mut out, t));
        }
        None => out.push(0),
    }
    match &ckpt.ema {
        Some(e) => {
            out.push(1);
            out.extend_from_slice(&e.updates.to_le_bytes());
            e.shadow.tensors().iter().for_each(|t| put_tensor_payload(&mut out, t));
        }
        None => out.push(0),
    }
    out.extend_from_slice(&ckpt.epoch.to_le_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn payload(&mut self, shape: &[usize]) -> Result<Tensor, CheckpointError> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(self.bytes.len()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(Tensor::from_vec(shape, data))
    }

    fn like(&mut self, layout: &ParamSet) -> Result<ParamSet, CheckpointError> {
        let mut out = ParamSet::new();
        for (name, t) in layout.names().iter().zip(layout.tensors()) {
            out.push(name.clone(), self.payload(t.shape())?);
        }
        Ok(out)
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    let meta_len = r.u32()? as usize;
    let meta = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|_| CheckpointError::Malformed("metadata is not UTF-8".into()))?;
    let n = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let t = r.payload(&shape)?;
        params.push(name, t);
    }
    let adam = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let m = r.like(&params)?;
            let v = r.like(&params)?;
            Some(AdamState { m, v, step })
        }
        f => return Err(CheckpointError::Malformed(format!("bad optimizer flag {f}"))),
    };
    let ema = match r.u8()? {
        0 => None,
        1 => {
            let updates = r.u64()?;
            Some(EmaState {
                shadow: r.like(&params)?,
                updates,
            })
        }
        f => return Err(CheckpointError::Malformed(format!("bad EMA flag {f}"))),
    };
    let epoch = r.u64()?;
    let step = r.u64()?;
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        meta,
        params,
        adam,
        ema,
        epoch,
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamSet::new();
        params.push("a.w", Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 0.25, 3.0, 0.0, -0.125]));
        params.push("b", Tensor::scalar(1.5));
        let mut adam = AdamState::new(&params);
        adam.step = 7;
        adam.m.tensors_mut()[1].data_mut()[0] = 0.75;
        let ema = EmaState {
            shadow: params.clone(),
            updates: 7,
        };
        Checkpoint {
            meta: "seed = 3\n".into(),
            params,
            adam: Some(adam),
            ema: Some(ema),
            epoch: 2,
            step: 7,
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = write_checkpoint(&c);
        assert_eq!(read_checkpoint(&bytes).unwrap(), c);
        let bare = Checkpoint {
            adam: None,
            ema: None,
            ..c
        };
        assert_eq!(read_checkpoint(&write_checkpoint(&bare)).unwrap(), bare);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = write_checkpoint(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(read_checkpoint(&bad), Err(CheckpointError::BadMagic));
        let mut bad = bytes.clone();
        bad[30] ^= 1;
        assert!(matches!(read_checkpoint(&bad), Err(CheckpointError::ChecksumMismatch { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(read_checkpoint(&bad), Err(CheckpointError::UnsupportedVersion(9)));
        assert!(read_checkpoint(&bytes[..bytes.len() - 9]).is_err());
    }
}
