//! Per-channel standardization of motion features.
//!
//! The diffusion model runs in standardized space. Foot-contact channels are
//! binary labels and pass through unchanged so the contact loss can read
//! them directly.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::dataset::MotionDataset;
use super::layout::{FeatureLayout, SliceKind};
use crate::error::{Error, Result};

/// Channels whose spread falls below this keep a unit scale.
const MIN_STD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureNormalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureNormalizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Population statistics over every frame of every clip.
    pub fn fit(data: &MotionDataset) -> Result<Self> {
        let d = data.layout.dim();
        let mut sum = Array1::<f64>::zeros(d);
        let mut sq = Array1::<f64>::zeros(d);
        let mut count = 0usize;
        for clip in &data.clips {
            let x = clip.frames.mapv(f64::from);
            sum += &x.sum_axis(Axis(0));
            sq += &x.mapv(|v| v * v).sum_axis(Axis(0));
            count += x.nrows();
        }
        if count == 0 {
            return Err(Error::EmptyDataset);
        }
        let mean = sum / count as f64;
        let var = sq / count as f64 - &mean * &mean;
        let mut out = Self {
            mean: mean.iter().map(|&v| v as f32).collect(),
            std: var.iter().map(|&v| if v.max(0.0).sqrt() > MIN_STD { v.sqrt() as f32 } else { 1.0 }).collect(),
        };
        out.exempt_contacts(&data.layout);
        Ok(out)
    }

    fn exempt_contacts(&mut self, layout: &FeatureLayout) {
        for c in layout.slice(SliceKind::FootContacts) {
            self.mean[c] = 0.0;
            self.std[c] = 1.0;
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.len() != self.mean.len() {
            return Err(Error::Malformed("normalizer mean and std differ in length".into()));
        }
        if self.std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Malformed("normalizer needs finite mean and positive std".into()));
        }
        Ok(())
    }

    fn check(&self, x: &ArrayView2<f32>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: x.ncols() });
        }
        Ok(())
    }

    pub fn normalize(&self, x: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.check(&x)?;
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        Ok((&x - &mean) / &std)
    }

    pub fn denormalize(&self, x: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.check(&x)?;
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        Ok(&x * &std + &mean)
    }

    /// A copy of `data` with every clip standardized.
    pub fn normalize_dataset(&self, data: &MotionDataset) -> Result<MotionDataset> {
        let mut out = data.clone();
        for clip in &mut out.clips {
            clip.frames = self.normalize(clip.frames.view())?;
        }
        Ok(out)
    }
}
