use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Deterministic map from a motion (`n × D`) to a fixed-width vector.
pub trait FeatureExtractor: Sync {
    fn dim(&self) -> usize;
    fn id(&self) -> String;
    fn extract(&self, motion: ArrayView2<f32>) -> Result<Array1<f64>>;

    /// One row per motion, computed in parallel and stacked in input order.
    fn extract_all(&self, motions: &[ArrayView2<f32>]) -> Result<Array2<f64>> {
        let rows: Vec<Array1<f64>> = motions.par_iter().map(|m| self.extract(*m)).collect::<Result<_>>()?;
        super::stack(&rows)
    }
}

/// Per-channel mean, standard deviation and mean absolute frame-to-frame
/// change, concatenated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatsExtractor {
    pub input_dim: usize,
}

impl FeatureExtractor for StatsExtractor {
    fn dim(&self) -> usize {
        3 * self.input_dim
    }

    fn id(&self) -> String {
        format!("stats-{}", self.input_dim)
    }

    fn extract(&self, motion: ArrayView2<f32>) -> Result<Array1<f64>> {
        let (n, d) = motion.dim();
        if d != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, found: d });
        }
        if n == 0 {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }
        let x = motion.mapv(f64::from);
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let std = x.var_axis(Axis(0), 0.0).mapv(f64::sqrt);
        let vel = if n > 1 {
            let diff = &x.slice(ndarray::s![1.., ..]) - &x.slice(ndarray::s![..-1, ..]);
            diff.mapv(f64::abs).mean_axis(Axis(0)).expect("non-empty")
        } else {
            Array1::zeros(d)
        };
        Ok(concatenate(Axis(0), &[mean.view(), std.view(), vel.view()]).expect("equal ranks"))
    }
}
