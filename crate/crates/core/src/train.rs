//! Pre-training and ControlNet fine-tuning loops.
//!
//! Every random draw (windows, timesteps, noise, ⟨eos⟩ drops) happens serially
//! on one ChaCha8 stream before the batch fans out over threads. Items run
//! forward and backward independently and their gradients are summed in item
//! order, so a step gives the same bits on one thread or many.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::DenoiserParams;
use crate::controlnet::{ControlBranch, ControlNetParams};
use crate::data::{FeatureLayout, MotionDataset};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport, LossWeights};
use crate::moc::TokenInput;
use crate::nn::ParamTree;
use crate::optim::{AdamW, OptimConfig};
use crate::schedule::{gaussian, NoiseSchedule};
use crate::text::{eos_dropout, TextConditioning};

pub const DEFAULT_L_MAX: usize = 300;
pub const DEFAULT_EOS_DROPOUT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub l_max: usize,
    pub optim: OptimConfig,
    #[serde(default)]
    pub weights: LossWeights,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { l_max: DEFAULT_L_MAX, optim: OptimConfig::pretrain(), weights: LossWeights::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub l_max: usize,
    pub optim: OptimConfig,
    #[serde(default)]
    pub weights: LossWeights,
    pub eos_dropout: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            l_max: DEFAULT_L_MAX,
            optim: OptimConfig::finetune(),
            weights: LossWeights::default(),
            eos_dropout: DEFAULT_EOS_DROPOUT,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eos_dropout) || self.l_max == 0 {
            return Err(Error::InvalidConfig("eos dropout must lie in [0, 1] and l_max ≥ 1".into()));
        }
        self.optim.validate()?;
        self.weights.validate()
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_max == 0 {
            return Err(Error::InvalidConfig("l_max must be at least 1".into()));
        }
        self.optim.validate()?;
        self.weights.validate()
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub simple: f64,
    pub vel: f64,
    pub foot: f64,
    pub total: f64,
}

impl StepRecord {
    fn new(step: usize, lr: f64, r: &LossReport) -> Self {
        Self { step, lr, simple: r.simple, vel: r.vel, foot: r.foot, total: r.total }
    }
}

/// Clean targets with the timesteps and noise that corrupt them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    /// `B × len × D`, zero on padding
    pub x0: Array3<f32>,
    pub mask: Array2<bool>,
    pub t: Vec<usize>,
    pub noise: Array3<f32>,
}

impl TrainingBatch {
    /// Pads `clips` to the longest one and draws `t ~ U[1, T]` and noise.
    pub fn from_clips<R: Rng + ?Sized>(clips: &[ArrayView2<f32>], t_max: usize, rng: &mut R) -> Result<Self> {
        let first = clips.first().ok_or(Error::EmptyDataset)?;
        let d = first.ncols();
        let len = clips.iter().map(|c| c.nrows()).max().unwrap_or(0);
        let mut x0 = Array3::zeros((clips.len(), len, d));
        let mut mask = Array2::from_elem((clips.len(), len), false);
        for (b, c) in clips.iter().enumerate() {
            if c.ncols() != d {
                return Err(Error::LayoutMismatch);
            }
            x0.slice_mut(s![b, ..c.nrows(), ..]).assign(c);
            mask.slice_mut(s![b, ..c.nrows()]).fill(true);
        }
        let t = (0..clips.len()).map(|_| rng.random_range(1..=t_max)).collect();
        let noise = gaussian(x0.raw_dim(), rng);
        Ok(Self { x0, mask, t, noise })
    }

    pub fn batch_size(&self) -> usize {
        self.t.len()
    }

    pub fn noisy(&self, schedule: &NoiseSchedule) -> Result<Array3<f32>> {
        let mut xt = Array3::zeros(self.x0.raw_dim());
        for (b, &t) in self.t.iter().enumerate() {
            let item = schedule.forward_noise(self.x0.index_axis(Axis(0), b), t, self.noise.index_axis(Axis(0), b))?;
            xt.index_axis_mut(Axis(0), b).assign(&item);
        }
        Ok(xt)
    }
}

/// Sliding-window batch from an unlabeled corpus.
pub fn draw_pretrain_batch<R: Rng + ?Sized>(
    data: &MotionDataset,
    l_max: usize,
    batch_size: usize,
    t_max: usize,
    rng: &mut R,
) -> Result<TrainingBatch> {
    let windows = (0..batch_size).map(|_| data.sample_window(l_max, rng)).collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = windows.iter().map(|w| w.data.view()).collect();
    TrainingBatch::from_clips(&views, t_max, rng)
}

/// Loss of the batch and, when `zero` is given, the parameter gradient.
/// `forward(i, x_t, t, mask)` and `backward(i, cache, dy, grad)` handle one
/// item each.
pub fn batch_loss_and_grad<C, G, Fw, Bw>(
    batch: &TrainingBatch,
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    layout: &FeatureLayout,
    zero: Option<&G>,
    forward: Fw,
    backward: Bw,
) -> Result<(LossReport, Option<G>)>
where
    C: Send + Sync,
    G: ParamTree<f32> + Clone + Send + Sync,
    Fw: Fn(usize, ArrayView2<f32>, usize, &[bool]) -> Result<(Array2<f32>, C)> + Sync,
    Bw: Fn(usize, &C, ArrayView2<f32>, &mut G) + Sync,
{
    let xt = batch.noisy(schedule)?;
    let b = batch.batch_size();
    let masks: Vec<Vec<bool>> = batch.mask.outer_iter().map(|r| r.to_vec()).collect();
    let fwd: Vec<(Array2<f32>, C)> = (0..b)
        .into_par_iter()
        .map(|i| forward(i, xt.index_axis(Axis(0), i), batch.t[i], &masks[i]))
        .collect::<Result<_>>()?;
    let mut pred = Array3::zeros(batch.x0.raw_dim());
    for (i, (y, _)) in fwd.iter().enumerate() {
        pred.index_axis_mut(Axis(0), i).assign(y);
    }
    let Some(zero) = zero else {
        let report = total_loss(batch.x0.view(), pred.view(), &batch.t, batch.mask.view(), weights, layout, schedule, None)?;
        return Ok((report, None));
    };
    let mut dy = Array3::zeros(pred.raw_dim());
    let report = total_loss(batch.x0.view(), pred.view(), &batch.t, batch.mask.view(), weights, layout, schedule, Some(&mut dy))?;
    let grads: Vec<G> = fwd
        .par_iter()
        .enumerate()
        .map(|(i, (_, cache))| {
            let mut g = zero.clone();
            backward(i, cache, dy.index_axis(Axis(0), i), &mut g);
            g
        })
        .collect();
    let mut iter = grads.into_iter();
    let mut total = iter.next().expect("non-empty batch");
    for g in iter {
        total.add_scaled(&g, 1.0);
    }
    Ok((report, Some(total)))
}

/// Unconditional objective on a fixed batch.
pub fn denoiser_loss(
    model: &DenoiserParams<f32>,
    batch: &TrainingBatch,
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    layout: &FeatureLayout,
    with_grad: bool,
) -> Result<(LossReport, Option<DenoiserParams<f32>>)> {
    let zero = with_grad.then(|| model.zeroed());
    batch_loss_and_grad(
        batch,
        schedule,
        weights,
        layout,
        zero.as_ref(),
        |_, x, t, m| model.forward_item(x, t, m),
        |_, c, dy, g| model.backward_item(c, dy, g),
    )
}

/// Conditional objective on a fixed batch, item `i` conditioned on `tokens[i]`.
pub fn controlnet_loss(
    net: &ControlNetParams<f32>,
    batch: &TrainingBatch,
    tokens: &[TokenInput<f32>],
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    layout: &FeatureLayout,
    with_grad: bool,
) -> Result<(LossReport, Option<ControlBranch<f32>>)> {
    if tokens.len() != batch.batch_size() {
        return Err(Error::ShapeMismatch("one prompt per batch item required".into()));
    }
    let zero = with_grad.then(|| net.branch.zeroed());
    batch_loss_and_grad(
        batch,
        schedule,
        weights,
        layout,
        zero.as_ref(),
        |i, x, t, m| net.forward_item(x, t, m, &tokens[i]),
        |i, c, dy, g| net.backward_item(c, &tokens[i], dy, g),
    )
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFiniteActivation(_) => Error::Diverged { step },
        other => other,
    }
}

fn apply<P: ParamTree<f32> + Clone>(
    params: &mut P,
    opt: &mut AdamW<P>,
    report: &LossReport,
    grad: Option<P>,
    cfg: &OptimConfig,
) -> Result<StepRecord> {
    let step = opt.step;
    let grad = grad.expect("gradient requested");
    if !report.total.is_finite() || !grad.all_finite() {
        return Err(Error::Diverged { step });
    }
    let lr = cfg.lr_at(step);
    opt.update(params, &grad, cfg);
    if !params.all_finite() {
        return Err(Error::Diverged { step });
    }
    Ok(StepRecord::new(step, lr, report))
}

/// One unconditional update on a freshly drawn sliding-window batch.
pub fn pretrain_step(
    model: &mut DenoiserParams<f32>,
    opt: &mut AdamW<DenoiserParams<f32>>,
    data: &MotionDataset,
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepRecord> {
    let batch = draw_pretrain_batch(data, cfg.l_max, cfg.optim.batch_size, schedule.t_max(), rng)?;
    let (report, grad) =
        denoiser_loss(model, &batch, schedule, &cfg.weights, &data.layout, true).map_err(diverged(opt.step))?;
    apply(model, opt, &report, grad, &cfg.optim)
}

pub fn pretrain(
    model: &mut DenoiserParams<f32>,
    opt: &mut AdamW<DenoiserParams<f32>>,
    data: &MotionDataset,
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    (0..n_steps).map(|_| pretrain_step(model, opt, data, schedule, cfg, rng)).collect()
}

/// A motion clip with its caption embedding.
#[derive(Debug, Clone)]
pub struct PairedExample {
    pub prompt: String,
    /// `n × D`
    pub motion: Array2<f32>,
    pub cond: TextConditioning,
}

#[derive(Debug, Clone)]
pub struct PairedData {
    pub layout: FeatureLayout,
    pub examples: Vec<PairedExample>,
    /// ⟨eos⟩ embedding of the empty prompt, swapped in by eos dropout.
    pub empty: ndarray::Array1<f32>,
}

/// Pairs drawn with replacement; clips longer than `l_max` get a random crop.
pub fn draw_finetune_batch<R: Rng + ?Sized>(
    data: &PairedData,
    l_max: usize,
    batch_size: usize,
    t_max: usize,
    p_drop: f64,
    rng: &mut R,
) -> Result<(TrainingBatch, Vec<TokenInput<f32>>)> {
    if data.examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut clips = Vec::with_capacity(batch_size);
    let mut tokens = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let ex = &data.examples[rng.random_range(0..data.examples.len())];
        let n = ex.motion.nrows();
        let (start, len) = if n > l_max { (rng.random_range(0..=n - l_max), l_max) } else { (0, n) };
        clips.push(ex.motion.slice(s![start..start + len, ..]));
        let mut cond = ex.cond.clone();
        eos_dropout(&mut cond, data.empty.view(), p_drop, rng);
        tokens.push(TokenInput::from_conditioning(&cond));
    }
    let batch = TrainingBatch::from_clips(&clips, t_max, rng)?;
    Ok((batch, tokens))
}

/// One ControlNet update; only the trainable branch moves.
pub fn finetune_step(
    net: &mut ControlNetParams<f32>,
    opt: &mut AdamW<ControlBranch<f32>>,
    data: &PairedData,
    schedule: &NoiseSchedule,
    cfg: &FinetuneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepRecord> {
    let (batch, tokens) =
        draw_finetune_batch(data, cfg.l_max, cfg.optim.batch_size, schedule.t_max(), cfg.eos_dropout, rng)?;
    let (report, grad) = controlnet_loss(net, &batch, &tokens, schedule, &cfg.weights, &data.layout, true)
        .map_err(diverged(opt.step))?;
    apply(&mut net.branch, opt, &report, grad, &cfg.optim)
}

pub fn finetune(
    net: &mut ControlNetParams<f32>,
    opt: &mut AdamW<ControlBranch<f32>>,
    data: &PairedData,
    schedule: &NoiseSchedule,
    cfg: &FinetuneConfig,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    (0..n_steps).map(|_| finetune_step(net, opt, data, schedule, cfg, rng)).collect()
}

/// Mean total loss over a slice of the step log.
pub fn mean_total(log: &[StepRecord]) -> f64 {
    log.iter().map(|r| r.total).sum::<f64>() / log.len().max(1) as f64
}
