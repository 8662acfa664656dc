//! Distribution and retrieval metrics over motion feature vectors.

pub mod encoder;
pub mod extract;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use encoder::{ContrastiveEncoder, EncoderConfig};
pub use extract::{FeatureExtractor, StatsExtractor};

pub const DEFAULT_POOL_SIZE: usize = 32;
pub const DEFAULT_TOP_K: usize = 3;

/// Gaussian fit of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    /// Unbiased sample covariance.
    pub cov: Array2<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// `features` holds one sample per row.
    pub fn from_features(features: ArrayView2<f64>) -> Result<Self> {
        let (n, _) = features.dim();
        if n < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: n });
        }
        let mean = features.mean_axis(Axis(0)).expect("non-empty");
        let centered = &features - &mean;
        let mut cov = centered.t().dot(&centered) / (n - 1) as f64;
        // exact symmetry regardless of summation order
        let sym = (&cov + &cov.t()) * 0.5;
        cov.assign(&sym);
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn to_matrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Symmetric PSD square root with negative eigenvalues clipped at zero.
fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`. The trace of the cross
/// term is taken as `Σ √λ_i` of `Σ_a^{1/2} Σ_b Σ_a^{1/2}`, which shares its
/// spectrum with `Σ_a Σ_b` and stays symmetric.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.dim() != b.cov.dim() {
        return Err(Error::DimMismatch(format!("feature dims {} and {}", a.dim(), b.dim())));
    }
    for s in [a, b] {
        if s.count < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: s.count });
        }
    }
    let mean_term: f64 = (&a.mean - &b.mean).mapv(|v| v * v).sum();
    let sa = to_matrix(&a.cov);
    let sb = to_matrix(&b.cov);
    let ra = psd_sqrt(sa.clone());
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((mean_term + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

/// Mean Euclidean distance over `n_pairs` disjoint random pairs of rows.
pub fn diversity<R: Rng + ?Sized>(features: ArrayView2<f64>, n_pairs: usize, rng: &mut R) -> Result<f64> {
    let n = features.nrows();
    if n_pairs == 0 || n < 2 * n_pairs {
        return Err(Error::TooFewSamples { needed: 2 * n_pairs.max(1), got: n });
    }
    let picks = index::sample(rng, n, 2 * n_pairs).into_vec();
    let total: f64 = picks
        .chunks_exact(2)
        .map(|p| {
            let d = &features.row(p[0]) - &features.row(p[1]);
            d.dot(&d).sqrt()
        })
        .sum();
    Ok(total / n_pairs as f64)
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(a.dot(&b) / (na * nb))
}

/// Mean cosine similarity between paired rows.
pub fn clip_score(motion: ArrayView2<f64>, text: ArrayView2<f64>) -> Result<f64> {
    if motion.dim() != text.dim() {
        return Err(Error::DimMismatch(format!("motion {:?} vs text {:?}", motion.dim(), text.dim())));
    }
    if motion.nrows() == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let sum = motion
        .outer_iter()
        .zip(text.outer_iter())
        .map(|(m, t)| cosine(m, t))
        .sum::<Result<f64>>()?;
    Ok(sum / motion.nrows() as f64)
}

/// Rank cut-off used for a pool: `top_k` clamped to `[1, pool_size − 1]`,
/// so a pool of two behaves as top-1.
pub fn effective_top_k(pool_size: usize, top_k: usize) -> usize {
    top_k.min(pool_size.saturating_sub(1)).max(1)
}

/// Fraction of motions whose own text ranks within the top `top_k` by cosine
/// among itself and `pool_size − 1` random distractor texts. Ties go to the
/// true text.
pub fn r_precision<R: Rng + ?Sized>(
    motion: ArrayView2<f64>,
    text: ArrayView2<f64>,
    pool_size: usize,
    top_k: usize,
    rng: &mut R,
) -> Result<f64> {
    let n = motion.nrows();
    if motion.dim() != text.dim() {
        return Err(Error::DimMismatch(format!("motion {:?} vs text {:?}", motion.dim(), text.dim())));
    }
    if pool_size == 0 || n < pool_size {
        return Err(Error::TooFewSamples { needed: pool_size.max(1), got: n });
    }
    let k = effective_top_k(pool_size, top_k);
    let mut hits = 0usize;
    let mut others: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        others.clear();
        others.extend((0..n).filter(|&j| j != i));
        let (distractors, _) = others.partial_shuffle(rng, pool_size - 1);
        let m = motion.row(i);
        let truth = cosine(m, text.row(i))?;
        let mut better = 0usize;
        for &j in distractors.iter() {
            if cosine(m, text.row(j))? > truth {
                better += 1;
            }
        }
        if better < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Mean and 95% normal-approximation half-width over replicate values.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

/// One line of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    pub extractor_id: String,
    /// Half-width of the 95% interval over `replicates` runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci95: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
}

/// Stacks feature vectors into rows.
pub fn stack(rows: &[Array1<f64>]) -> Result<Array2<f64>> {
    let d = rows.first().map(|r| r.len()).ok_or(Error::TooFewSamples { needed: 1, got: 0 })?;
    let mut out = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::DimMismatch(format!("row {i} has {} features, expected {d}", r.len())));
        }
        out.row_mut(i).assign(r);
    }
    Ok(out)
}
