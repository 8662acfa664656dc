//! Motion sequences and the `.omgm` container.
//!
//! Layout (little-endian): magic `OMGM`, version `u32 = 1`, fps `u32`,
//! n_frames `u32`, D `u32`, layout_id `u32`, then `n_frames * D` `f32`
//! values in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::layout::{FeatureLayout, SliceKind};
use crate::error::{Error, Result};

pub const MOTION_MAGIC: [u8; 4] = *b"OMGM";
pub const MOTION_VERSION: u32 = 1;
pub const STANDARD_FPS: u32 = 30;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    /// `n_frames × D`
    pub frames: Array2<f32>,
    pub fps: u32,
    pub layout_id: u32,
}

impl MotionSequence {
    pub fn new(frames: Array2<f32>, fps: u32, layout_id: u32) -> Self {
        Self { frames, fps, layout_id }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn validate(&self, layout: &FeatureLayout) -> Result<()> {
        if self.layout_id != layout.id {
            return Err(Error::LayoutMismatch);
        }
        if self.dim() != layout.dim() {
            return Err(Error::DimensionMismatch { expected: layout.dim(), found: self.dim() });
        }
        if self.n_frames() == 0 {
            return Err(Error::Malformed("motion has zero frames".into()));
        }
        if let Some(((frame, channel), _)) = self.frames.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteValue { frame, channel });
        }
        let contacts = layout.slice(SliceKind::FootContacts);
        for (frame, row) in self.frames.outer_iter().enumerate() {
            for c in contacts.clone() {
                if !(0.0..=1.0).contains(&row[c]) {
                    return Err(Error::Malformed(format!(
                        "foot contact {} at frame {frame} outside [0, 1]",
                        row[c]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.frames.len());
        out.extend_from_slice(&MOTION_MAGIC);
        for v in [MOTION_VERSION, self.fps, self.n_frames() as u32, self.dim() as u32, self.layout_id] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in self.frames.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses and validates an `.omgm` payload.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Malformed(format!("header needs {HEADER_LEN} bytes, got {}", bytes.len())));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != MOTION_MAGIC {
            return Err(Error::BadMagic { expected: MOTION_MAGIC, found: magic });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let version = word(0);
        if version != MOTION_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let (fps, n, d, layout_id) = (word(1), word(2) as usize, word(3) as usize, word(4));
        let layout = FeatureLayout::by_id(layout_id)?;
        if d != layout.dim() {
            return Err(Error::DimensionMismatch { expected: layout.dim(), found: d });
        }
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != n * d * 4 {
            return Err(Error::Malformed(format!(
                "payload holds {} bytes, header promises {}",
                payload.len(),
                n * d * 4
            )));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let frames = Array2::from_shape_vec((n, d), values).map_err(|e| Error::Malformed(e.to_string()))?;
        let seq = Self { frames, fps, layout_id };
        seq.validate(&layout)?;
        Ok(seq)
    }

    /// Linear per-channel resampling to `target_fps`. Foot contacts are
    /// re-binarized at 0.5.
    pub fn resample(&self, target_fps: u32, layout: &FeatureLayout) -> Self {
        if target_fps == self.fps || self.n_frames() == 1 {
            return Self { frames: self.frames.clone(), fps: target_fps, layout_id: self.layout_id };
        }
        let n = self.n_frames();
        let duration = (n - 1) as f64 / self.fps as f64;
        let m = (duration * target_fps as f64).floor() as usize + 1;
        let contacts = layout.slice(SliceKind::FootContacts);
        let mut frames = Array2::zeros((m, self.dim()));
        for i in 0..m {
            let src = (i as f64 / target_fps as f64 * self.fps as f64).min((n - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let w = (src - lo as f64) as f32;
            for c in 0..self.dim() {
                let v = self.frames[[lo, c]] * (1.0 - w) + self.frames[[hi, c]] * w;
                frames[[i, c]] = if contacts.contains(&c) { if v >= 0.5 { 1.0 } else { 0.0 } } else { v };
            }
        }
        Self { frames, fps: target_fps, layout_id: self.layout_id }
    }
}

pub fn read_motion_file(path: impl AsRef<Path>) -> Result<MotionSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    MotionSequence::from_bytes(&bytes)
}

pub fn write_motion_file(seq: &MotionSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&seq.to_bytes()).map_err(|e| Error::io(path, e))
}
