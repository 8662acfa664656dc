use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layout::FeatureLayout;
use super::motion::{read_motion_file, write_motion_file, MotionSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub clip_id: String,
    pub n_frames: usize,
    /// Index of the clip's first frame in the concatenated frame numbering.
    pub offset: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub clips: Vec<ClipEntry>,
    pub total_frames: usize,
}

impl DatasetIndex {
    pub fn from_lengths<'a>(clips: impl IntoIterator<Item = (&'a str, usize)>) -> Self {
        let mut index = Self::default();
        for (id, n) in clips {
            index.clips.push(ClipEntry { clip_id: id.to_string(), n_frames: n, offset: index.total_frames });
            index.total_frames += n;
        }
        index
    }

    /// Clip holding global frame `frame`.
    pub fn locate(&self, frame: usize) -> (usize, usize) {
        let c = self.clips.partition_point(|c| c.offset + c.n_frames <= frame);
        (c, frame - self.clips[c].offset)
    }
}

/// Window position before the frames are copied out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpan {
    pub clip: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub clip_id: String,
    pub start: usize,
    pub len: usize,
    pub layout_id: u32,
    /// `len × D`
    pub data: Array2<f32>,
}

/// Window length for a start at `start` in a clip of `n_frames`:
/// `l ~ U[1, min(l_max, n_frames - start)]`.
pub fn draw_window_len<R: Rng + ?Sized>(n_frames: usize, start: usize, l_max: usize, rng: &mut R) -> usize {
    let hi = l_max.min(n_frames - start);
    rng.random_range(1..=hi)
}

/// Draws a start frame uniformly over every frame of the dataset (with
/// replacement) and a window length clipped at the clip end.
pub fn draw_window<R: Rng + ?Sized>(index: &DatasetIndex, l_max: usize, rng: &mut R) -> Result<WindowSpan> {
    if index.total_frames == 0 {
        return Err(Error::EmptyDataset);
    }
    if l_max == 0 {
        return Err(Error::InvalidConfig("maximum window length must be >= 1".into()));
    }
    let frame = rng.random_range(0..index.total_frames);
    let (clip, start) = index.locate(frame);
    let len = draw_window_len(index.clips[clip].n_frames, start, l_max, rng);
    Ok(WindowSpan { clip, start, len })
}

#[derive(Debug, Clone)]
pub struct MotionDataset {
    pub layout: FeatureLayout,
    pub index: DatasetIndex,
    pub clips: Vec<MotionSequence>,
}

impl MotionDataset {
    pub fn new(layout: FeatureLayout, named: Vec<(String, MotionSequence)>) -> Result<Self> {
        for (_, seq) in &named {
            seq.validate(&layout)?;
        }
        let index = DatasetIndex::from_lengths(named.iter().map(|(id, s)| (id.as_str(), s.n_frames())));
        Ok(Self { layout, index, clips: named.into_iter().map(|(_, s)| s).collect() })
    }

    pub fn sample_window<R: Rng + ?Sized>(&self, l_max: usize, rng: &mut R) -> Result<WindowSample> {
        let span = draw_window(&self.index, l_max, rng)?;
        Ok(self.window(span))
    }

    pub fn window(&self, span: WindowSpan) -> WindowSample {
        let clip = &self.clips[span.clip];
        WindowSample {
            clip_id: self.index.clips[span.clip].clip_id.clone(),
            start: span.start,
            len: span.len,
            layout_id: clip.layout_id,
            data: clip.frames.slice(s![span.start..span.start + span.len, ..]).to_owned(),
        }
    }

    /// Loads every `.omgm` file of `dir` in file-name order; clip ids are
    /// the file stems.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "omgm"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut named = Vec::with_capacity(paths.len());
        for p in &paths {
            let seq = read_motion_file(p)?;
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            named.push((id, seq));
        }
        let layout = FeatureLayout::by_id(named[0].1.layout_id)?;
        Self::new(layout, named)
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (entry, seq) in self.index.clips.iter().zip(&self.clips) {
            write_motion_file(seq, dir.join(format!("{}.omgm", entry.clip_id)))?;
        }
        let idx = serde_json::to_vec_pretty(&self.index)?;
        let p = dir.join("index.json");
        fs::write(&p, idx).map_err(|e| Error::io(&p, e))
    }
}

/// Zero-padded batch with a per-frame validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    /// `B × pad_to × D`
    pub data: Array3<f32>,
    /// `B × pad_to`
    pub mask: Array2<bool>,
    pub layout_id: u32,
}

impl PaddedBatch {
    pub fn lens(&self) -> Vec<usize> {
        self.mask.outer_iter().map(|r| r.iter().filter(|&&m| m).count()).collect()
    }
}

pub fn batch_windows(samples: &[WindowSample], pad_to: usize) -> Result<PaddedBatch> {
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    let d = first.data.ncols();
    if samples.iter().any(|s| s.layout_id != first.layout_id || s.data.ncols() != d) {
        return Err(Error::LayoutMismatch);
    }
    let max_len = samples.iter().map(|s| s.len).max().unwrap_or(0);
    if pad_to < max_len {
        return Err(Error::ShapeMismatch(format!("pad_to {pad_to} shorter than longest window {max_len}")));
    }
    let mut data = Array3::zeros((samples.len(), pad_to, d));
    let mut mask = Array2::from_elem((samples.len(), pad_to), false);
    for (b, s) in samples.iter().enumerate() {
        data.slice_mut(s![b, ..s.len, ..]).assign(&s.data);
        mask.slice_mut(s![b, ..s.len]).fill(true);
    }
    Ok(PaddedBatch { data, mask, layout_id: first.layout_id })
}
