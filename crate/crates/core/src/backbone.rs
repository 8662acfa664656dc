//! Transformer denoiser: timestep-modulated blocks with rotary attention,
//! predicting the clean motion from a noised one.
//!
//! Each block is modulated adaLN-Zero style from the timestep embedding `c`.
//! The modulation map is factored through a rank-`r` bottleneck,
//! `silu(c)·W_down·W_up + b`, with `W_up` and `b` zero-initialized so every
//! residual branch starts closed.

use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    gelu, gelu_grad, join, layer_norm, layer_norm_backward, lit, masked_softmax_row, silu, silu_grad,
    softmax_row_backward, Linear, ParamTree, Real,
};
use crate::schedule::Denoiser;

pub const INIT_STD: f64 = 0.02;
pub const ROPE_BASE: f64 = 10_000.0;
pub const DEFAULT_MAX_LEN: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Tiny,
    Base,
    Large,
    Huge,
    Giant,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(Self::Tiny),
            "base" => Ok(Self::Base),
            "large" => Ok(Self::Large),
            "huge" => Ok(Self::Huge),
            "giant" => Ok(Self::Giant),
            other => Err(Error::InvalidConfig(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub input_dim: usize,
    /// Rank of the factored block modulation.
    pub mod_rank: usize,
    /// Width of the sinusoidal timestep features.
    pub freq_dim: usize,
}

impl ModelConfig {
    pub fn preset(p: Preset, input_dim: usize) -> Self {
        // (layers, d_model, heads, d_head, mod_rank, freq_dim)
        let (n_layers, d_model, n_heads, d_head, mod_rank, freq_dim) = match p {
            Preset::Tiny => (2, 64, 4, 16, 16, 64),
            Preset::Base => (8, 1024, 8, 128, 176, 2816),
            Preset::Large => (12, 1280, 10, 128, 220, 3520),
            Preset::Huge => (16, 1664, 13, 128, 286, 4576),
            Preset::Giant => (24, 2048, 16, 128, 352, 5632),
        };
        Self {
            n_layers,
            d_model,
            n_heads,
            d_head,
            d_ff: 2 * d_model,
            max_len: DEFAULT_MAX_LEN,
            input_dim,
            mod_rank,
            freq_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_head % 2 != 0 {
            return Err(Error::OddHeadDim(self.d_head));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::InvalidConfig(format!(
                "{} heads of width {} do not tile d_model {}",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.freq_dim % 2 != 0 || self.freq_dim == 0 {
            return Err(Error::InvalidConfig("timestep feature width must be even and positive".into()));
        }
        if [self.n_layers, self.d_ff, self.max_len, self.input_dim, self.mod_rank].contains(&0) {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Tensor names and shapes in parameter order, without allocating.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, r, ff) = (self.d_model, self.mod_rank, self.d_ff);
        let mut out = Vec::new();
        let mut lin = |name: String, i: usize, o: usize, bias: bool| {
            out.push((format!("{name}.weight"), vec![i, o]));
            if bias {
                out.push((format!("{name}.bias"), vec![o]));
            }
        };
        lin("input".into(), self.input_dim, d, true);
        lin("time.fc1".into(), self.freq_dim, d, true);
        lin("time.fc2".into(), d, d, true);
        for l in 0..self.n_layers {
            let p = format!("layers.{l}");
            lin(format!("{p}.mod_down"), d, r, false);
            lin(format!("{p}.mod_up"), r, 6 * d, true);
            for n in ["q", "k", "v", "o"] {
                lin(format!("{p}.attn.{n}"), d, d, true);
            }
            lin(format!("{p}.ff1"), d, ff, true);
            lin(format!("{p}.ff2"), ff, d, true);
        }
        lin("final_mod".into(), d, 2 * d, true);
        lin("output".into(), d, self.input_dim, true);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Rotation tables for a set of positions: `cos`/`sin` are `len × d_head/2`.
#[derive(Debug, Clone)]
pub struct Rope<F> {
    cos: Array2<F>,
    sin: Array2<F>,
}

impl<F: Real> Rope<F> {
    pub fn new(d_head: usize, positions: &[f64]) -> Result<Self> {
        if d_head % 2 != 0 {
            return Err(Error::OddHeadDim(d_head));
        }
        let half = d_head / 2;
        let angle = |p: usize, i: usize| positions[p] * ROPE_BASE.powf(-((2 * i) as f64) / d_head as f64);
        Ok(Self {
            cos: Array2::from_shape_fn((positions.len(), half), |(p, i)| lit(angle(p, i).cos())),
            sin: Array2::from_shape_fn((positions.len(), half), |(p, i)| lit(angle(p, i).sin())),
        })
    }

    pub fn sequential(d_head: usize, len: usize) -> Result<Self> {
        let pos: Vec<f64> = (0..len).map(|p| p as f64).collect();
        Self::new(d_head, &pos)
    }

    /// Rotates every head of `x` (`len × heads·d_head`) in place. `inverse`
    /// applies the transpose rotation, which is the backward pass.
    pub fn apply(&self, x: &mut Array2<F>, d_head: usize, inverse: bool) {
        let half = d_head / 2;
        let heads = x.ncols() / d_head;
        for (p, mut row) in x.outer_iter_mut().enumerate() {
            for h in 0..heads {
                for i in 0..half {
                    let (c, mut sn) = (self.cos[[p, i]], self.sin[[p, i]]);
                    if inverse {
                        sn = -sn;
                    }
                    let a = h * d_head + 2 * i;
                    let (x0, x1) = (row[a], row[a + 1]);
                    row[a] = x0 * c - x1 * sn;
                    row[a + 1] = x0 * sn + x1 * c;
                }
            }
        }
    }
}

/// Unscaled attention logits `rope(q)·rope(k)ᵀ` per head. `q` and `k` are
/// `heads × len × d_head`.
pub fn rotary_scores<F: Real>(q: ArrayView3<F>, k: ArrayView3<F>, positions: &[f64]) -> Result<Array3<F>> {
    let (heads, len, dh) = q.dim();
    if k.dim() != q.dim() || positions.len() != len {
        return Err(Error::ShapeMismatch("q, k and positions must agree".into()));
    }
    let rope = Rope::new(dh, positions)?;
    let mut out = Array3::zeros((heads, len, len));
    for h in 0..heads {
        let mut qh = q.index_axis(Axis(0), h).to_owned();
        let mut kh = k.index_axis(Axis(0), h).to_owned();
        rope.apply(&mut qh, dh, false);
        rope.apply(&mut kh, dh, false);
        out.index_axis_mut(Axis(0), h).assign(&qh.dot(&kh.t()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub mod_down: Linear<F>,
    pub mod_up: Linear<F>,
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub o: Linear<F>,
    pub ff1: Linear<F>,
    pub ff2: Linear<F>,
}

impl<F: Real> ParamTree<F> for Block<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        self.mod_down.visit(&join(prefix, "mod_down"), out);
        self.mod_up.visit(&join(prefix, "mod_up"), out);
        self.q.visit(&join(prefix, "attn.q"), out);
        self.k.visit(&join(prefix, "attn.k"), out);
        self.v.visit(&join(prefix, "attn.v"), out);
        self.o.visit(&join(prefix, "attn.o"), out);
        self.ff1.visit(&join(prefix, "ff1"), out);
        self.ff2.visit(&join(prefix, "ff2"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        self.mod_down.visit_mut(&join(prefix, "mod_down"), out);
        self.mod_up.visit_mut(&join(prefix, "mod_up"), out);
        self.q.visit_mut(&join(prefix, "attn.q"), out);
        self.k.visit_mut(&join(prefix, "attn.k"), out);
        self.v.visit_mut(&join(prefix, "attn.v"), out);
        self.o.visit_mut(&join(prefix, "attn.o"), out);
        self.ff1.visit_mut(&join(prefix, "ff1"), out);
        self.ff2.visit_mut(&join(prefix, "ff2"), out);
    }
}

/// Activations kept from [`Block::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache<F> {
    silu_c: Array1<F>,
    z: Array1<F>,
    modv: Array1<F>,
    n1: Array2<F>,
    inv1: Array1<F>,
    h1: Array2<F>,
    attn: AttentionCache<F>,
    att: Array2<F>,
    o: Array2<F>,
    n2: Array2<F>,
    inv2: Array1<F>,
    h2: Array2<F>,
    f1: Array2<F>,
    g: Array2<F>,
    f2: Array2<F>,
}

#[derive(Debug, Clone)]
struct AttentionCache<F> {
    qr: Array2<F>,
    kr: Array2<F>,
    v: Array2<F>,
    /// one `len × len` probability matrix per head
    probs: Vec<Array2<F>>,
}

fn modulate<F: Real>(n: &Array2<F>, shift: ArrayView1<F>, scale: ArrayView1<F>) -> Array2<F> {
    let one_plus = scale.mapv(|s| F::one() + s);
    n * &one_plus + &shift
}

fn col_sum_product<F: Real>(a: &Array2<F>, b: &Array2<F>) -> Array1<F> {
    (a * b).sum_axis(Axis(0))
}

fn attention_forward<F: Real>(
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    mask: &[bool],
    n_heads: usize,
    rope: &Rope<F>,
) -> (Array2<F>, AttentionCache<F>) {
    let (len, d) = q.dim();
    let dh = d / n_heads;
    let (mut qr, mut kr) = (q, k);
    rope.apply(&mut qr, dh, false);
    rope.apply(&mut kr, dh, false);
    let scale: F = lit(1.0 / (dh as f64).sqrt());
    let mut att = Array2::zeros((len, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let logits = qr.slice(cols).dot(&kr.slice(cols).t()) * scale;
        let mut p = Array2::zeros((len, len));
        for (i, row) in logits.outer_iter().enumerate() {
            p.row_mut(i).assign(&masked_softmax_row(row, mask));
        }
        att.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    (att, AttentionCache { qr, kr, v, probs })
}

fn attention_backward<F: Real>(
    datt: &Array2<F>,
    cache: &AttentionCache<F>,
    rope: &Rope<F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let (len, d) = datt.dim();
    let n_heads = cache.probs.len();
    let dh = d / n_heads;
    let scale: F = lit(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::zeros((len, d));
    let mut dk = Array2::zeros((len, d));
    let mut dv = Array2::zeros((len, d));
    for (h, p) in cache.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dout = datt.slice(cols);
        let dp = dout.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dout));
        let mut ds = Array2::zeros((len, len));
        for i in 0..len {
            ds.row_mut(i).assign(&(softmax_row_backward(p.row(i), dp.row(i)) * scale));
        }
        dq.slice_mut(cols).assign(&ds.dot(&cache.kr.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.qr.slice(cols)));
    }
    rope.apply(&mut dq, dh, true);
    rope.apply(&mut dk, dh, true);
    (dq, dk, dv)
}

impl<F: Real> Block<F> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, r, ff) = (cfg.d_model, cfg.mod_rank, cfg.d_ff);
        Self {
            mod_down: Linear::init(d, r, false, INIT_STD, rng),
            mod_up: Linear::zeros(r, 6 * d, true),
            q: Linear::init(d, d, true, INIT_STD, rng),
            k: Linear::init(d, d, true, INIT_STD, rng),
            v: Linear::init(d, d, true, INIT_STD, rng),
            o: Linear::init(d, d, true, INIT_STD, rng),
            ff1: Linear::init(d, ff, true, INIT_STD, rng),
            ff2: Linear::init(ff, d, true, INIT_STD, rng),
        }
    }

    fn d_model(&self) -> usize {
        self.q.d_in()
    }

    /// One block over a single sequence `x` (`len × d_model`).
    pub fn forward(
        &self,
        x: ArrayView2<F>,
        silu_c: ArrayView1<F>,
        mask: &[bool],
        n_heads: usize,
        rope: &Rope<F>,
    ) -> (Array2<F>, BlockCache<F>) {
        let d = self.d_model();
        let z = self.mod_down.forward_vec(silu_c);
        let modv = self.mod_up.forward_vec(z.view());
        let part = |i: usize| modv.slice(s![i * d..(i + 1) * d]);
        let (shift1, scale1, gate1, shift2, scale2, gate2) = (part(0), part(1), part(2), part(3), part(4), part(5));

        let (n1, inv1) = layer_norm(x);
        let h1 = modulate(&n1, shift1, scale1);
        let q = self.q.forward(h1.view());
        let k = self.k.forward(h1.view());
        let v = self.v.forward(h1.view());
        let (att, attn) = attention_forward(q, k, v, mask, n_heads, rope);
        let o = self.o.forward(att.view());
        let x1 = &x + &(&o * &gate1);

        let (n2, inv2) = layer_norm(x1.view());
        let h2 = modulate(&n2, shift2, scale2);
        let f1 = self.ff1.forward(h2.view());
        let g = f1.mapv(gelu);
        let f2 = self.ff2.forward(g.view());
        let y = &x1 + &(&f2 * &gate2);

        let cache = BlockCache {
            silu_c: silu_c.to_owned(),
            z,
            modv: modv.clone(),
            n1,
            inv1,
            h1,
            attn,
            att,
            o,
            n2,
            inv2,
            h2,
            f1,
            g,
            f2,
        };
        (y, cache)
    }

    /// Returns the gradients with respect to the block input and to
    /// `silu(c)`, accumulating parameter gradients into `grad` when given.
    pub fn backward(
        &self,
        cache: &BlockCache<F>,
        dy: ArrayView2<F>,
        rope: &Rope<F>,
        mut grad: Option<&mut Block<F>>,
    ) -> (Array2<F>, Array1<F>) {
        let d = self.d_model();
        let m = &cache.modv;
        let part = |i: usize| m.slice(s![i * d..(i + 1) * d]);
        let (scale1, gate1, scale2, gate2) = (part(1), part(2), part(4), part(5));

        let mut dx1 = dy.to_owned();
        let dgate2 = col_sum_product(&dx1, &cache.f2);
        let df2 = &dx1 * &gate2;
        let dg = self.ff2.backward(cache.g.view(), df2.view(), grad.as_deref_mut().map(|g| &mut g.ff2));
        let df1 = Zip::from(&dg).and(&cache.f1).map_collect(|&g, &f| g * gelu_grad(f));
        let dh2 = self.ff1.backward(cache.h2.view(), df1.view(), grad.as_deref_mut().map(|g| &mut g.ff1));
        let dshift2 = dh2.sum_axis(Axis(0));
        let dscale2 = col_sum_product(&dh2, &cache.n2);
        let dn2 = &dh2 * &scale2.mapv(|s| F::one() + s);
        dx1 += &layer_norm_backward(cache.n2.view(), cache.inv2.view(), dn2.view());

        let dgate1 = col_sum_product(&dx1, &cache.o);
        let d_o = &dx1 * &gate1;
        let datt = self.o.backward(cache.att.view(), d_o.view(), grad.as_deref_mut().map(|g| &mut g.o));
        let (dq, dk, dv) = attention_backward(&datt, &cache.attn, rope);
        let mut dh1 = self.q.backward(cache.h1.view(), dq.view(), grad.as_deref_mut().map(|g| &mut g.q));
        dh1 += &self.k.backward(cache.h1.view(), dk.view(), grad.as_deref_mut().map(|g| &mut g.k));
        dh1 += &self.v.backward(cache.h1.view(), dv.view(), grad.as_deref_mut().map(|g| &mut g.v));
        let dshift1 = dh1.sum_axis(Axis(0));
        let dscale1 = col_sum_product(&dh1, &cache.n1);
        let dn1 = &dh1 * &scale1.mapv(|s| F::one() + s);
        let dx = dx1 + layer_norm_backward(cache.n1.view(), cache.inv1.view(), dn1.view());

        let dmod = concatenate(
            Axis(0),
            &[dshift1.view(), dscale1.view(), dgate1.view(), dshift2.view(), dscale2.view(), dgate2.view()],
        )
        .expect("equal widths");
        let dz = self.mod_up.backward_vec(cache.z.view(), dmod.view(), grad.as_deref_mut().map(|g| &mut g.mod_up));
        let dsc = self.mod_down.backward_vec(cache.silu_c.view(), dz.view(), grad.as_deref_mut().map(|g| &mut g.mod_down));
        (dx, dsc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<F> {
    pub config: ModelConfig,
    pub input: Linear<F>,
    pub time_fc1: Linear<F>,
    pub time_fc2: Linear<F>,
    pub layers: Vec<Block<F>>,
    pub final_mod: Linear<F>,
    pub output: Linear<F>,
}

impl<F: Real> ParamTree<F> for DenoiserParams<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        self.input.visit(&join(prefix, "input"), out);
        self.time_fc1.visit(&join(prefix, "time.fc1"), out);
        self.time_fc2.visit(&join(prefix, "time.fc2"), out);
        self.layers.visit(&join(prefix, "layers"), out);
        self.final_mod.visit(&join(prefix, "final_mod"), out);
        self.output.visit(&join(prefix, "output"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        self.input.visit_mut(&join(prefix, "input"), out);
        self.time_fc1.visit_mut(&join(prefix, "time.fc1"), out);
        self.time_fc2.visit_mut(&join(prefix, "time.fc2"), out);
        self.layers.visit_mut(&join(prefix, "layers"), out);
        self.final_mod.visit_mut(&join(prefix, "final_mod"), out);
        self.output.visit_mut(&join(prefix, "output"), out);
    }
}

/// Sinusoidal timestep features `[cos(t·ω_i), sin(t·ω_i)]`,
/// `ω_i = 10000^(−i/half)`.
pub fn timestep_features<F: Real>(t: usize, dim: usize) -> Array1<F> {
    let half = dim / 2;
    Array1::from_shape_fn(dim, |j| {
        let i = j % half;
        let w = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * w;
        lit(if j < half { a.cos() } else { a.sin() })
    })
}

#[derive(Debug, Clone)]
pub struct TimeCache<F> {
    freq: Array1<F>,
    a1: Array1<F>,
    s1: Array1<F>,
    c: Array1<F>,
    /// `silu(c)`, the input of every modulation map
    pub silu_c: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct HeadCache<F> {
    silu_c: Array1<F>,
    fm: Array1<F>,
    nf: Array2<F>,
    invf: Array1<F>,
    hf: Array2<F>,
    mask: Vec<bool>,
}

/// Everything [`DenoiserParams::backward_item`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ItemCache<F> {
    x_in: Array2<F>,
    pub time: TimeCache<F>,
    pub rope: Rope<F>,
    pub blocks: Vec<BlockCache<F>>,
    pub head: HeadCache<F>,
}

impl<F: Real> DenoiserParams<F> {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Self {
            input: Linear::init(config.input_dim, d, true, INIT_STD, rng),
            time_fc1: Linear::init(config.freq_dim, d, true, INIT_STD, rng),
            time_fc2: Linear::init(d, d, true, INIT_STD, rng),
            layers: (0..config.n_layers).map(|_| Block::init(&config, rng)).collect(),
            final_mod: Linear::zeros(d, 2 * d, true),
            output: Linear::init(d, config.input_dim, true, INIT_STD, rng),
            config,
        })
    }

    /// All-zero parameters with the shapes of `config`.
    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.d_model;
        let block = || Block {
            mod_down: Linear::zeros(d, config.mod_rank, false),
            mod_up: Linear::zeros(config.mod_rank, 6 * d, true),
            q: Linear::zeros(d, d, true),
            k: Linear::zeros(d, d, true),
            v: Linear::zeros(d, d, true),
            o: Linear::zeros(d, d, true),
            ff1: Linear::zeros(d, config.d_ff, true),
            ff2: Linear::zeros(config.d_ff, d, true),
        };
        Self {
            input: Linear::zeros(config.input_dim, d, true),
            time_fc1: Linear::zeros(config.freq_dim, d, true),
            time_fc2: Linear::zeros(d, d, true),
            layers: (0..config.n_layers).map(|_| block()).collect(),
            final_mod: Linear::zeros(d, 2 * d, true),
            output: Linear::zeros(d, config.input_dim, true),
            config,
        }
    }

    pub fn embed_time(&self, t: usize) -> TimeCache<F> {
        let freq = timestep_features(t, self.config.freq_dim);
        let a1 = self.time_fc1.forward_vec(freq.view());
        let s1 = a1.mapv(silu);
        let c = self.time_fc2.forward_vec(s1.view());
        let silu_c = c.mapv(silu);
        TimeCache { freq, a1, s1, c, silu_c }
    }

    pub fn embed_time_backward(&self, cache: &TimeCache<F>, d_silu_c: ArrayView1<F>, grad: &mut Self) {
        let dc = Zip::from(&d_silu_c).and(&cache.c).map_collect(|&g, &c| g * silu_grad(c));
        let ds1 = self.time_fc2.backward_vec(cache.s1.view(), dc.view(), Some(&mut grad.time_fc2));
        let da1 = Zip::from(&ds1).and(&cache.a1).map_collect(|&g, &a| g * silu_grad(a));
        self.time_fc1.backward_vec(cache.freq.view(), da1.view(), Some(&mut grad.time_fc1));
    }

    pub fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::LengthExceeded { len, max: self.config.max_len });
        }
        if len == 0 {
            return Err(Error::ShapeMismatch("sequence has no frames".into()));
        }
        Ok(())
    }

    /// Final modulated norm and output projection; padded rows are zeroed.
    pub fn head_forward(&self, h: ArrayView2<F>, silu_c: ArrayView1<F>, mask: &[bool]) -> (Array2<F>, HeadCache<F>) {
        let d = self.config.d_model;
        let fm = self.final_mod.forward_vec(silu_c);
        let (nf, invf) = layer_norm(h);
        let hf = modulate(&nf, fm.slice(s![..d]), fm.slice(s![d..]));
        let mut out = self.output.forward(hf.view());
        for (mut row, &m) in out.outer_iter_mut().zip(mask) {
            if !m {
                row.fill(F::zero());
            }
        }
        (out, HeadCache { silu_c: silu_c.to_owned(), fm, nf, invf, hf, mask: mask.to_vec() })
    }

    pub fn head_backward(&self, cache: &HeadCache<F>, dy: ArrayView2<F>, mut grad: Option<&mut Self>) -> (Array2<F>, Array1<F>) {
        let d = self.config.d_model;
        let mut dout = dy.to_owned();
        for (mut row, &m) in dout.outer_iter_mut().zip(&cache.mask) {
            if !m {
                row.fill(F::zero());
            }
        }
        let dhf = self.output.backward(cache.hf.view(), dout.view(), grad.as_deref_mut().map(|g| &mut g.output));
        let dshift = dhf.sum_axis(Axis(0));
        let dscale = col_sum_product(&dhf, &cache.nf);
        let dnf = &dhf * &cache.fm.slice(s![d..]).mapv(|s| F::one() + s);
        let dh = layer_norm_backward(cache.nf.view(), cache.invf.view(), dnf.view());
        let dfm = concatenate(Axis(0), &[dshift.view(), dscale.view()]).expect("equal widths");
        let dsc = self.final_mod.backward_vec(cache.silu_c.view(), dfm.view(), grad.as_deref_mut().map(|g| &mut g.final_mod));
        (dh, dsc)
    }

    /// Clean-motion prediction for one sequence `x_t` (`len × D`).
    pub fn forward_item(&self, x_t: ArrayView2<F>, t: usize, mask: &[bool]) -> Result<(Array2<F>, ItemCache<F>)> {
        let (len, dim) = x_t.dim();
        self.check_len(len)?;
        if dim != self.config.input_dim || mask.len() != len {
            return Err(Error::ShapeMismatch(format!("input {len}×{dim} with mask of {}", mask.len())));
        }
        let time = self.embed_time(t);
        let rope = Rope::sequential(self.config.d_head, len)?;
        let mut h = self.input.forward(x_t);
        let mut blocks = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (next, cache) = layer.forward(h.view(), time.silu_c.view(), mask, self.config.n_heads, &rope);
            if !crate::nn::all_finite(next.view()) {
                return Err(Error::NonFiniteActivation(format!("layer {l}")));
            }
            h = next;
            blocks.push(cache);
        }
        let (out, head) = self.head_forward(h.view(), time.silu_c.view(), mask);
        if !crate::nn::all_finite(out.view()) {
            return Err(Error::NonFiniteActivation("output".into()));
        }
        Ok((out, ItemCache { x_in: x_t.to_owned(), time, rope, blocks, head }))
    }

    /// Accumulates the gradient of a scalar loss with output gradient `dy`.
    pub fn backward_item(&self, cache: &ItemCache<F>, dy: ArrayView2<F>, grad: &mut Self) {
        let (mut dh, mut dsc) = self.head_backward(&cache.head, dy, Some(grad));
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (dprev, dsc_l) = layer.backward(&cache.blocks[l], dh.view(), &cache.rope, Some(&mut grad.layers[l]));
            dh = dprev;
            dsc += &dsc_l;
        }
        self.input.backward(cache.x_in.view(), dh.view(), Some(&mut grad.input));
        self.embed_time_backward(&cache.time, dsc.view(), grad);
    }

    /// Batched forward, items in parallel.
    pub fn denoise_batch(&self, x_t: ArrayView3<F>, t: &[usize], mask: ArrayView2<bool>) -> Result<Array3<F>> {
        let (b, len, dim) = x_t.dim();
        if t.len() != b || mask.dim() != (b, len) {
            return Err(Error::ShapeMismatch("timesteps and mask must match the batch".into()));
        }
        let outs: Vec<Array2<F>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let m: Vec<bool> = mask.row(i).to_vec();
                self.forward_item(x_t.index_axis(Axis(0), i), t[i], &m).map(|(y, _)| y)
            })
            .collect::<Result<_>>()?;
        let mut out = Array3::zeros((b, len, dim));
        for (i, y) in outs.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&y);
        }
        Ok(out)
    }
}

impl<F: Real> Denoiser<F> for DenoiserParams<F> {
    fn denoise(&self, x_t: ArrayView3<F>, t: &[usize], mask: ArrayView2<bool>) -> Result<Array3<F>> {
        self.denoise_batch(x_t, t, mask)
    }
}
