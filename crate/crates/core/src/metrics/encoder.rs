//! Motion encoder trained to land near its caption's ⟨eos⟩ embedding.
//!
//! Frames are standardized, passed through a per-frame GELU layer, averaged
//! within `segments` contiguous time slices, concatenated, projected to the
//! text width and unit-normalized. Segment pooling keeps coarse ordering, so
//! "walk then kick" and "kick then walk" land apart.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::extract::FeatureExtractor;
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, join, Linear, ParamTree};
use crate::optim::{AdamW, DecayKind, OptimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub segments: usize,
    /// InfoNCE temperature.
    pub temperature: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { hidden: 64, segments: 2, temperature: 0.1, steps: 400, batch_size: 32, lr: 3e-3 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.segments == 0 || self.batch_size < 2 || self.steps == 0 {
            return Err(Error::InvalidConfig("encoder needs hidden, segments, steps >= 1 and batch >= 2".into()));
        }
        if !(self.temperature > 0.0) || !(self.lr >= 0.0) {
            return Err(Error::InvalidConfig("encoder needs temperature > 0 and lr >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub frame: Linear<f64>,
    pub proj: Linear<f64>,
}

impl ParamTree<f64> for EncoderParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        self.frame.visit(&join(prefix, "frame"), out);
        self.proj.visit(&join(prefix, "proj"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        self.frame.visit_mut(&join(prefix, "frame"), out);
        self.proj.visit_mut(&join(prefix, "proj"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveEncoder {
    pub config: EncoderConfig,
    pub input_mean: Array1<f64>,
    pub input_std: Array1<f64>,
    pub params: EncoderParams,
}

struct Trace {
    z: Array2<f64>,
    pre: Array2<f64>,
    pooled: Array1<f64>,
    out: Array1<f64>,
    norm: f64,
}

/// Frame range of segment `k` out of `segments` for a clip of `n` frames.
/// Every segment is non-empty; short clips reuse frames.
fn segment(n: usize, k: usize, segments: usize) -> std::ops::Range<usize> {
    let start = (k * n / segments).min(n - 1);
    let end = ((k + 1) * n / segments).max(start + 1);
    start..end
}

impl ContrastiveEncoder {
    /// Random weights with identity standardization.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, input_dim: usize, text_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || text_dim == 0 {
            return Err(Error::InvalidConfig("encoder widths must be positive".into()));
        }
        let h = config.hidden;
        let frame = Linear::init(input_dim, h, true, (1.0 / input_dim as f64).sqrt(), rng);
        let proj = Linear::init(config.segments * h, text_dim, true, (1.0 / (config.segments * h) as f64).sqrt(), rng);
        Ok(Self {
            config,
            input_mean: Array1::zeros(input_dim),
            input_std: Array1::ones(input_dim),
            params: EncoderParams { frame, proj },
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_mean.len()
    }

    pub fn text_dim(&self) -> usize {
        self.params.proj.d_out()
    }

    /// Sets the per-channel standardization from every frame of `motions`.
    pub fn fit_standardization(&mut self, motions: &[ArrayView2<f32>]) -> Result<()> {
        let d = self.input_dim();
        let mut sum = Array1::<f64>::zeros(d);
        let mut sq = Array1::<f64>::zeros(d);
        let mut count = 0usize;
        for m in motions {
            if m.ncols() != d {
                return Err(Error::DimensionMismatch { expected: d, found: m.ncols() });
            }
            for row in m.outer_iter() {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += f64::from(v);
                    sq[j] += f64::from(v) * f64::from(v);
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }
        let mean = sum / count as f64;
        let var = sq / count as f64 - &mean * &mean;
        self.input_std = var.mapv(|v| if v > 1e-12 { v.sqrt() } else { 1.0 });
        self.input_mean = mean;
        Ok(())
    }

    fn trace(&self, motion: ArrayView2<f32>) -> Result<Trace> {
        let (n, d) = motion.dim();
        if d != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), found: d });
        }
        if n == 0 {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }
        let z = (motion.mapv(f64::from) - &self.input_mean) / &self.input_std;
        let pre = self.params.frame.forward(z.view());
        let act = pre.mapv(gelu);
        let h = self.config.hidden;
        let mut pooled = Array1::zeros(self.config.segments * h);
        for k in 0..self.config.segments {
            let seg = act.slice(s![segment(n, k, self.config.segments), ..]);
            pooled.slice_mut(s![k * h..(k + 1) * h]).assign(&seg.mean_axis(Axis(0)).expect("non-empty segment"));
        }
        let raw = self.params.proj.forward_vec(pooled.view());
        let norm = raw.dot(&raw).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(Trace { z, pre, pooled, out: raw / norm, norm })
    }

    fn backward(&self, tr: &Trace, dy: ArrayView1<f64>, grad: &mut EncoderParams) {
        let y = &tr.out;
        let draw = (&dy - &(y * y.dot(&dy))) / tr.norm;
        let dpooled = self.params.proj.backward_vec(tr.pooled.view(), draw.view(), Some(&mut grad.proj));
        let (n, h) = tr.pre.dim();
        let mut dact = Array2::<f64>::zeros((n, h));
        for k in 0..self.config.segments {
            let seg = segment(n, k, self.config.segments);
            let share = dpooled.slice(s![k * h..(k + 1) * h]).mapv(|v| v / seg.len() as f64);
            for i in seg {
                let mut row = dact.row_mut(i);
                row += &share;
            }
        }
        let dpre = &dact * &tr.pre.mapv(gelu_grad);
        self.params.frame.backward(tr.z.view(), dpre.view(), Some(&mut grad.frame));
    }

    /// Symmetric InfoNCE of `motions` against unit-normalized `texts` (one
    /// row per motion), and the parameter gradient when requested.
    pub fn contrastive_loss(
        &self,
        motions: &[ArrayView2<f32>],
        texts: ArrayView2<f64>,
        grad: Option<&mut EncoderParams>,
    ) -> Result<f64> {
        let b = motions.len();
        if texts.nrows() != b || b < 2 {
            return Err(Error::TooFewSamples { needed: 2.max(texts.nrows()), got: b });
        }
        if texts.ncols() != self.text_dim() {
            return Err(Error::DimMismatch(format!("text width {} but encoder emits {}", texts.ncols(), self.text_dim())));
        }
        let traces: Vec<Trace> = motions.iter().map(|m| self.trace(*m)).collect::<Result<_>>()?;
        let mut y = Array2::zeros((b, self.text_dim()));
        for (i, tr) in traces.iter().enumerate() {
            y.row_mut(i).assign(&tr.out);
        }
        let tau = self.config.temperature;
        let logits = y.dot(&texts.t()) / tau;
        let row_p = softmax_rows(logits.view());
        let col_p = softmax_rows(logits.t()).reversed_axes();
        let mut loss = 0.0;
        for i in 0..b {
            loss -= 0.5 * (row_p[[i, i]].ln() + col_p[[i, i]].ln());
        }
        loss /= b as f64;
        if let Some(g) = grad {
            let mut dl = (&row_p + &col_p) * (0.5 / b as f64);
            for i in 0..b {
                dl[[i, i]] -= 1.0 / b as f64;
            }
            let dy = dl.dot(&texts) / tau;
            for (i, tr) in traces.iter().enumerate() {
                self.backward(tr, dy.row(i), g);
            }
        }
        Ok(loss)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = EncoderFile {
            config: self.config,
            input_mean: self.input_mean.to_vec(),
            input_std: self.input_std.to_vec(),
            text_dim: self.text_dim(),
            tensors: self.params.named().into_iter().map(|(n, t)| (n, t.iter().copied().collect())).collect(),
        };
        std::fs::write(path, serde_json::to_vec(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut file: EncoderFile = serde_json::from_slice(&bytes)?;
        let d = file.input_mean.len();
        if file.input_std.len() != d {
            return Err(Error::Malformed("standardization vectors differ in length".into()));
        }
        let mut enc = Self::init(file.config, d, file.text_dim, &mut ChaCha8Rng::seed_from_u64(0))?;
        // every tensor is overwritten below
        enc.input_mean = Array1::from(file.input_mean);
        enc.input_std = Array1::from(file.input_std);
        for (name, mut t) in enc.params.named_mut() {
            let src = file.tensors.remove(&name).ok_or_else(|| Error::Malformed(format!("missing tensor {name}")))?;
            if src.len() != t.len() {
                return Err(Error::Malformed(format!("tensor {name} has {} values, expected {}", src.len(), t.len())));
            }
            for (dst, v) in t.iter_mut().zip(src) {
                *dst = v;
            }
        }
        if let Some(extra) = file.tensors.keys().next() {
            return Err(Error::Malformed(format!("unexpected tensor {extra}")));
        }
        Ok(enc)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderFile {
    config: EncoderConfig,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
    text_dim: usize,
    tensors: BTreeMap<String, Vec<f64>>,
}

fn softmax_rows(a: ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for mut row in out.outer_iter_mut() {
        let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

/// Unit-normalized copies of the rows of `texts`.
pub fn normalize_rows(texts: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = texts.to_owned();
    for mut row in out.outer_iter_mut() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        row /= n;
    }
    Ok(out)
}

impl FeatureExtractor for ContrastiveEncoder {
    fn dim(&self) -> usize {
        self.text_dim()
    }

    fn id(&self) -> String {
        format!("contrastive-{}", &self.params.checksum()[..12])
    }

    fn extract(&self, motion: ArrayView2<f32>) -> Result<Array1<f64>> {
        Ok(self.trace(motion)?.out)
    }
}

/// Fits standardization on `motions`, then trains with AdamW on random
/// batches. `texts` holds the caption embedding of each motion. Returns the
/// encoder and the per-step loss.
pub fn train_contrastive_encoder<R: Rng + ?Sized>(
    motions: &[ArrayView2<f32>],
    texts: ArrayView2<f64>,
    config: EncoderConfig,
    rng: &mut R,
) -> Result<(ContrastiveEncoder, Vec<f64>)> {
    let n = motions.len();
    if texts.nrows() != n {
        return Err(Error::ShapeMismatch(format!("{n} motions but {} captions", texts.nrows())));
    }
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let d = motions[0].ncols();
    let mut enc = ContrastiveEncoder::init(config, d, texts.ncols(), rng)?;
    enc.fit_standardization(motions)?;
    let texts = normalize_rows(texts)?;
    let optim = OptimConfig {
        lr: config.lr,
        warmup_steps: config.steps / 20,
        total_steps: config.steps,
        decay: DecayKind::Cosine,
        weight_decay: 0.0,
        batch_size: config.batch_size,
        ..OptimConfig::pretrain()
    };
    let mut opt = AdamW::new(&enc.params);
    let b = config.batch_size.min(n);
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let pick = index::sample(rng, n, b).into_vec();
        let batch: Vec<ArrayView2<f32>> = pick.iter().map(|&i| motions[i]).collect();
        let tb = texts.select(Axis(0), &pick);
        let mut grad = enc.params.zeroed();
        let loss = enc.contrastive_loss(&batch, tb.view(), Some(&mut grad))?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::Diverged { step });
        }
        opt.update(&mut enc.params, &grad, &optim);
        log.push(loss);
    }
    Ok((enc, log))
}
