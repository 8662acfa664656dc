//! Cosine noise schedule, forward noising and the DDIM reverse sampler.
//!
//! Both parameterizations share the form `x_t = a_t·x + b_t·ε`:
//! variance-preserving uses `(√ᾱ_t, √(1−ᾱ_t))`, variance-exploding uses
//! `(1, σ_t)` with `σ_t = √((1−ᾱ_t)/ᾱ_t)`, the noise level with the same
//! signal-to-noise ratio.

use ndarray::{Array, Array2, Array3, ArrayView, ArrayView2, ArrayView3, Dimension, ShapeBuilder, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{lit, Real};

pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;
pub const DEFAULT_T: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    #[default]
    VariancePreserving,
    VarianceExploding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// `ᾱ_0..ᾱ_T`
    alpha_bar: Vec<f64>,
    pub kind: ScheduleKind,
    pub parameterization: Parameterization,
}

impl NoiseSchedule {
    /// `ᾱ_t = f(t)/f(0)` with `f(t) = cos²(((t/T + s₀)/(1 + s₀))·π/2)`,
    /// rebuilt as a cumulative product after clipping each `β_t` at 0.999.
    pub fn cosine(t_max: usize) -> Self {
        assert!(t_max >= 1, "schedule needs at least one step");
        let f = |t: usize| {
            let u = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let raw: Vec<f64> = (0..=t_max).map(|t| f(t) / f0).collect();
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        for t in 1..=t_max {
            let beta = (1.0 - raw[t] / raw[t - 1]).min(MAX_BETA);
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
        }
        Self { alpha_bar, kind: ScheduleKind::Cosine, parameterization: Parameterization::VariancePreserving }
    }

    pub fn with_parameterization(mut self, p: Parameterization) -> Self {
        self.parameterization = p;
        self
    }

    pub fn t_max(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar[t] / self.alpha_bar[t - 1]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.t_max() {
            return Err(Error::ScheduleOutOfRange { t, max: self.t_max() });
        }
        Ok(())
    }

    /// Signal and noise coefficients `(a_t, b_t)`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        match self.parameterization {
            Parameterization::VariancePreserving => (ab.sqrt(), (1.0 - ab).sqrt()),
            Parameterization::VarianceExploding => (1.0, ((1.0 - ab) / ab).sqrt()),
        }
    }

    /// `a_t·x + b_t·noise`.
    pub fn forward_noise<F: Real, D: Dimension>(
        &self,
        x: ArrayView<F, D>,
        t: usize,
        noise: ArrayView<F, D>,
    ) -> Result<Array<F, D>> {
        self.check(t)?;
        if x.shape() != noise.shape() {
            return Err(Error::ShapeMismatch(format!("x {:?} vs noise {:?}", x.shape(), noise.shape())));
        }
        if t == 0 {
            return Ok(x.to_owned());
        }
        let (a, b) = self.coefficients(t);
        let (a, b): (F, F) = (lit(a), lit(b));
        Ok(Zip::from(&x).and(&noise).map_collect(|&x, &n| a * x + b * n))
    }

    /// Noise implied by `x_t` and a clean estimate.
    pub fn predict_noise<F: Real, D: Dimension>(
        &self,
        x_t: ArrayView<F, D>,
        x0_hat: ArrayView<F, D>,
        t: usize,
    ) -> Result<Array<F, D>> {
        self.check(t)?;
        if t == 0 {
            return Err(Error::ScheduleOutOfRange { t, max: self.t_max() });
        }
        let (a, b) = self.coefficients(t);
        let (a, inv_b): (F, F) = (lit(a), lit(1.0 / b));
        Ok(Zip::from(&x_t).and(&x0_hat).map_collect(|&x, &x0| (x - a * x0) * inv_b))
    }

    /// One DDIM update from `t_cur` to `t_prev`. With `eta > 0` (VP only) the
    /// stochastic variant adds fresh noise drawn from `rng`.
    pub fn ddim_step<F: Real, D: Dimension, R: Rng + ?Sized>(
        &self,
        x_t: ArrayView<F, D>,
        x0_hat: ArrayView<F, D>,
        t_cur: usize,
        t_prev: usize,
        eta: f64,
        rng: &mut R,
    ) -> Result<Array<F, D>> {
        self.check(t_cur)?;
        if t_prev >= t_cur {
            return Err(Error::ScheduleOutOfRange { t: t_prev, max: t_cur.saturating_sub(1) });
        }
        if t_prev == 0 && eta == 0.0 {
            return Ok(x0_hat.to_owned());
        }
        let eps = self.predict_noise(x_t.view(), x0_hat.view(), t_cur)?;
        let (a_prev, b_prev) = self.coefficients(t_prev);
        if eta == 0.0 {
            let (a, b): (F, F) = (lit(a_prev), lit(b_prev));
            return Ok(Zip::from(&x0_hat).and(&eps).map_collect(|&x0, &e| a * x0 + b * e));
        }
        if self.parameterization != Parameterization::VariancePreserving {
            return Err(Error::InvalidConfig("stochastic DDIM requires the variance-preserving form".into()));
        }
        let (ab_cur, ab_prev) = (self.alpha_bar[t_cur], self.alpha_bar[t_prev]);
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_cur)).sqrt() * (1.0 - ab_cur / ab_prev).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let (a, d, s): (F, F, F) = (lit(a_prev), lit(dir), lit(sigma));
        let z: Array<F, D> = gaussian(x_t.raw_dim(), rng);
        Ok(Zip::from(&x0_hat).and(&eps).and(&z).map_collect(|&x0, &e, &z| a * x0 + d * e + s * z))
    }

    /// `τ_k = round(k·T/n)` for `k = 0..=n`, both endpoints included.
    pub fn sub_schedule(&self, n_steps: usize) -> Result<Vec<usize>> {
        let t = self.t_max();
        if n_steps == 0 || n_steps > t {
            return Err(Error::InvalidConfig(format!("sampling steps must lie in [1, {t}], got {n_steps}")));
        }
        Ok((0..=n_steps).map(|k| ((k * t) as f64 / n_steps as f64).round() as usize).collect())
    }
}

/// Standard-normal array drawn in `f64` and cast.
pub fn gaussian<F: Real, Sh: ShapeBuilder, R: Rng + ?Sized>(shape: Sh, rng: &mut R) -> Array<F, Sh::Dim> {
    Array::from_shape_simple_fn(shape, || lit(rng.sample::<f64, _>(StandardNormal)))
}

/// An `x₀`-predicting denoiser over a padded batch `B × L × D`.
pub trait Denoiser<F: Real>: Sync {
    fn denoise(&self, x_t: ArrayView3<F>, t: &[usize], mask: ArrayView2<bool>) -> Result<Array3<F>>;
}

impl<F: Real, T: Fn(ArrayView3<F>, &[usize], ArrayView2<bool>) -> Result<Array3<F>> + Sync> Denoiser<F> for T {
    fn denoise(&self, x_t: ArrayView3<F>, t: &[usize], mask: ArrayView2<bool>) -> Result<Array3<F>> {
        self(x_t, t, mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub guidance: f64,
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_steps: 200, guidance: 4.5, eta: 0.0 }
    }
}

/// Guided clean estimate `u + s·(c − u)`. `s = 0` and `s = 1` return the
/// unconditional and conditional predictions untouched.
pub fn guide<F: Real>(u: Array3<F>, c: Array3<F>, s: f64) -> Array3<F> {
    if s == 0.0 {
        return u;
    }
    if s == 1.0 {
        return c;
    }
    let s: F = lit(s);
    Zip::from(&u).and(&c).map_collect(|&u, &c| u + s * (c - u))
}

/// Draws one `length × dim` motion with classifier-free guidance between
/// `uncond` and `cond`. Without `cond`, samples unconditionally.
pub fn sample<F: Real, R: Rng + ?Sized>(
    uncond: &dyn Denoiser<F>,
    cond: Option<&dyn Denoiser<F>>,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    length: usize,
    dim: usize,
    rng: &mut R,
) -> Result<Array2<F>> {
    if config.guidance < 0.0 {
        return Err(Error::InvalidConfig("guidance strength must be non-negative".into()));
    }
    let taus = schedule.sub_schedule(config.n_steps)?;
    let t_max = schedule.t_max();
    let b_t: F = lit(schedule.coefficients(t_max).1);
    let mut x: Array3<F> = gaussian((1, length, dim), rng).mapv(|v: F| v * b_t);
    let mask = Array2::from_elem((1, length), true);
    let s = config.guidance;
    for k in (1..taus.len()).rev() {
        let (t_cur, t_prev) = (taus[k], taus[k - 1]);
        let x0 = match cond {
            Some(c) if s == 1.0 => c.denoise(x.view(), &[t_cur], mask.view())?,
            Some(c) if s != 0.0 => {
                let u = uncond.denoise(x.view(), &[t_cur], mask.view())?;
                let cv = c.denoise(x.view(), &[t_cur], mask.view())?;
                guide(u, cv, s)
            }
            _ => uncond.denoise(x.view(), &[t_cur], mask.view())?,
        };
        x = schedule.ddim_step(x.view(), x0.view(), t_cur, t_prev, config.eta, rng)?;
    }
    Ok(x.index_axis_move(ndarray::Axis(0), 0))
}
