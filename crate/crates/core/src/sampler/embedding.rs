use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SamplerError, SamplerMode};
use crate::event::SensorSize;
use crate::repr::{read_frame, write_frame, FrameTensor, TimeWindow};
use crate::tensor::Tensor;

/// `K` aggregated slots of shape `(2, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub slots: Vec<Tensor>,
    pub sensor: SensorSize,
    pub mode: SamplerMode,
    pub rpd: bool,
    pub sat: bool,
    /// Sampler steps `T_m`.
    pub steps: usize,
    pub step_us: u64,
    pub window: TimeWindow,
}

impl EmbeddingSequence {
    /// Stacked `(K, 2, H, W)` tensor.
    pub fn stacked(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.slots.len() * self.sensor.bins());
        for s in &self.slots {
            data.extend_from_slice(s.data());
        }
        let (h, w) = (self.sensor.height as usize, self.sensor.width as usize);
        Tensor::from_vec(&[self.slots.len(), 2, h, w], data)
    }
}

pub const MANIFEST_NAME: &str = "manifest.toml";
const MANIFEST_FORMAT: &str = "adasample-embedding";

/// Text manifest stored next to the per-slot `FRM1` files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub format: String,
    pub version: u32,
    pub slots: usize,
    pub mode: SamplerMode,
    pub rpd: bool,
    pub sat: bool,
    pub steps: usize,
    pub step_us: u64,
    pub t_start: u64,
    pub t_end: u64,
    pub width: u16,
    pub height: u16,
    pub files: Vec<String>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SamplerError {
    SamplerError::Io(format!("{}: {e}", path.display()))
}

/// Writes `slot_<k>.frm` for every slot plus `manifest.toml` into `dir`.
/// Slot payloads are stored as `f32`.
pub fn write_embedding(dir: &Path, emb: &EmbeddingSequence) -> Result<EmbeddingManifest, SamplerError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut files = Vec::new();
    for (k, slot) in emb.slots.iter().enumerate() {
        let name = format!("slot_{k}.frm");
        let frame = FrameTensor {
            channels: 2,
            sensor: emb.sensor,
            data: slot.data().to_vec(),
            slice_index: k,
            window: emb.window,
        };
        let path = dir.join(&name);
        fs::write(&path, write_frame(&frame)).map_err(|e| io_err(&path, e))?;
        files.push(name);
    }
    let manifest = EmbeddingManifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        slots: emb.slots.len(),
        mode: emb.mode,
        rpd: emb.rpd,
        sat: emb.sat,
        steps: emb.steps,
        step_us: emb.step_us,
        t_start: emb.window.start,
        t_end: emb.window.end,
        width: emb.sensor.width,
        height: emb.sensor.height,
        files,
    };
    let text = toml::to_string(&manifest).map_err(|e| SamplerError::Io(e.to_string()))?;
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

pub fn read_embedding(dir: &Path) -> Result<EmbeddingSequence, SamplerError> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let m: EmbeddingManifest = toml::from_str(&text).map_err(|e| io_err(&path, e))?;
    if m.format != MANIFEST_FORMAT || m.version != 1 || m.files.len() != m.slots {
        return Err(io_err(&path, "unsupported or inconsistent manifest"));
    }
    let sensor = SensorSize::new(m.width, m.height);
    let shape = [2, m.height as usize, m.width as usize];
    let mut slots = Vec::with_capacity(m.slots);
    for name in &m.files {
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
        let frame = read_frame(&bytes).map_err(|e| io_err(&p, e))?;
        if frame.channels != 2 || frame.sensor != sensor {
            return Err(SamplerError::ShapeMismatch(format!("{name} does not match the manifest")));
        }
        slots.push(Tensor::from_vec(&shape, frame.data));
    }
    Ok(EmbeddingSequence {
        slots,
        sensor,
        mode: m.mode,
        rpd: m.rpd,
        sat: m.sat,
        steps: m.steps,
        step_us: m.step_us,
        window: TimeWindow::new(m.t_start, m.t_end),
    })
}
