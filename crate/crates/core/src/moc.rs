//! Mixture-of-controllers conditioning block.
//!
//! Per sequence: a kernel-1 down projection to the control width `d_m`,
//! cross-attention from motion frames to text tokens, instance normalization
//! modulated by the end-of-sequence embedding, one blended expert per text
//! token whose output is gated by a sharpened column of the attention map,
//! a sum over tokens, and a kernel-1 up projection back to `d_model`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    gelu, gelu_grad, join, lit, masked_softmax_row, sigmoid, softmax_row_backward, softmax_vec, to_f64,
    trunc_normal_matrix, Linear, ParamTree, Real,
};
use crate::text::{TextConditioning, CLIP_DIM};

pub const ADA_IN_EPS: f64 = 1e-5;
pub const MOC_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    NoZeroConv,
    NoAttnMask,
    CrossAttnFfn,
    PoolSize(usize),
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "none"),
            Self::NoZeroConv => write!(f, "no-zero-conv"),
            Self::NoAttnMask => write!(f, "no-attn-mask"),
            Self::CrossAttnFfn => write!(f, "cross-attn-ffn"),
            Self::PoolSize(k) => write!(f, "pool-size={k}"),
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "no-zero-conv" => Ok(Self::NoZeroConv),
            "no-attn-mask" => Ok(Self::NoAttnMask),
            "cross-attn-ffn" => Ok(Self::CrossAttnFfn),
            other => other
                .strip_prefix("pool-size=")
                .and_then(|k| k.parse().ok())
                .filter(|&k: &usize| k >= 1)
                .map(Self::PoolSize)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation {other:?}"))),
        }
    }
}

impl Serialize for Ablation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ablation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoCConfig {
    pub d_m: usize,
    pub pool_size: usize,
    pub gamma: f64,
    pub beta: f64,
    pub d_c: usize,
    pub use_attention_mask: bool,
    pub use_zero_conv: bool,
    pub experts_as_plain_ffn: bool,
}

impl Default for MoCConfig {
    fn default() -> Self {
        Self {
            d_m: 256,
            pool_size: 12,
            gamma: 24.0,
            beta: 0.25,
            d_c: CLIP_DIM,
            use_attention_mask: true,
            use_zero_conv: true,
            experts_as_plain_ffn: false,
        }
    }
}

impl MoCConfig {
    pub fn with_ablation(mut self, a: Ablation) -> Self {
        match a {
            Ablation::None => {}
            Ablation::NoZeroConv => self.use_zero_conv = false,
            Ablation::NoAttnMask => self.use_attention_mask = false,
            Ablation::CrossAttnFfn => {
                self.experts_as_plain_ffn = true;
                self.pool_size = 1;
            }
            Ablation::PoolSize(k) => self.pool_size = k,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 || self.d_m == 0 || self.d_c == 0 {
            return Err(Error::InvalidConfig("control width, text width and pool size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta) || self.gamma <= 0.0 {
            return Err(Error::InvalidConfig("mask threshold must lie in [0, 1) and sharpness be positive".into()));
        }
        Ok(())
    }
}

/// `K` two-layer feed-forward parameter sets of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPool<F> {
    /// `K × d_m × 2d_m`
    pub w0: Array3<F>,
    /// `K × 2d_m`
    pub b0: Array2<F>,
    /// `K × 2d_m × d_m`
    pub w1: Array3<F>,
    /// `K × d_m`
    pub b1: Array2<F>,
}

/// One expert, either a pool entry or a blend of entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert<F> {
    pub w0: Array2<F>,
    pub b0: Array1<F>,
    pub w1: Array2<F>,
    pub b1: Array1<F>,
}

impl<F: Real> ExpertPool<F> {
    pub fn init<R: Rng + ?Sized>(k: usize, d_m: usize, rng: &mut R) -> Self {
        let mut w0 = Array3::zeros((k, d_m, 2 * d_m));
        let mut w1 = Array3::zeros((k, 2 * d_m, d_m));
        for j in 0..k {
            w0.index_axis_mut(Axis(0), j).assign(&trunc_normal_matrix(d_m, 2 * d_m, MOC_INIT_STD, rng));
            w1.index_axis_mut(Axis(0), j).assign(&trunc_normal_matrix(2 * d_m, d_m, MOC_INIT_STD, rng));
        }
        Self { w0, b0: Array2::zeros((k, 2 * d_m)), w1, b1: Array2::zeros((k, d_m)) }
    }

    pub fn size(&self) -> usize {
        self.w0.len_of(Axis(0))
    }

    pub fn get(&self, j: usize) -> Expert<F> {
        Expert {
            w0: self.w0.index_axis(Axis(0), j).to_owned(),
            b0: self.b0.row(j).to_owned(),
            w1: self.w1.index_axis(Axis(0), j).to_owned(),
            b1: self.b1.row(j).to_owned(),
        }
    }

    /// `Σ_j ω_j e_j`.
    pub fn blend(&self, omega: ArrayView1<F>) -> Expert<F> {
        let mut e = Expert {
            w0: Array2::zeros(self.w0.index_axis(Axis(0), 0).raw_dim()),
            b0: Array1::zeros(self.b0.ncols()),
            w1: Array2::zeros(self.w1.index_axis(Axis(0), 0).raw_dim()),
            b1: Array1::zeros(self.b1.ncols()),
        };
        for (j, &w) in omega.iter().enumerate() {
            e.w0.scaled_add(w, &self.w0.index_axis(Axis(0), j));
            e.b0.scaled_add(w, &self.b0.row(j));
            e.w1.scaled_add(w, &self.w1.index_axis(Axis(0), j));
            e.b1.scaled_add(w, &self.b1.row(j));
        }
        e
    }

    /// Pushes the gradient of a blended expert back to the pool
    /// (`de_j += ω_j·de`) and returns `∂/∂ω_j = ⟨de, e_j⟩`.
    fn blend_backward(&self, omega: ArrayView1<F>, de: &Expert<F>, grad: Option<&mut ExpertPool<F>>) -> Array1<F> {
        let k = self.size();
        let mut domega = Array1::zeros(k);
        for j in 0..k {
            let dot = (&de.w0 * &self.w0.index_axis(Axis(0), j)).sum()
                + de.b0.dot(&self.b0.row(j))
                + (&de.w1 * &self.w1.index_axis(Axis(0), j)).sum()
                + de.b1.dot(&self.b1.row(j));
            domega[j] = dot;
        }
        if let Some(g) = grad {
            for (j, &w) in omega.iter().enumerate() {
                g.w0.index_axis_mut(Axis(0), j).scaled_add(w, &de.w0);
                g.b0.row_mut(j).scaled_add(w, &de.b0);
                g.w1.index_axis_mut(Axis(0), j).scaled_add(w, &de.w1);
                g.b1.row_mut(j).scaled_add(w, &de.b1);
            }
        }
        domega
    }
}

impl<F: Real> ParamTree<F> for ExpertPool<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        out.push((join(prefix, "w0"), self.w0.view().into_dyn()));
        out.push((join(prefix, "b0"), self.b0.view().into_dyn()));
        out.push((join(prefix, "w1"), self.w1.view().into_dyn()));
        out.push((join(prefix, "b1"), self.b1.view().into_dyn()));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        out.push((join(prefix, "w0"), self.w0.view_mut().into_dyn()));
        out.push((join(prefix, "b0"), self.b0.view_mut().into_dyn()));
        out.push((join(prefix, "w1"), self.w1.view_mut().into_dyn()));
        out.push((join(prefix, "b1"), self.b1.view_mut().into_dyn()));
    }
}

struct ExpertCache<F> {
    a: Array2<F>,
    g: Array2<F>,
    y: Array2<F>,
}

fn expert_apply<F: Real>(u: ArrayView2<F>, e: &Expert<F>) -> ExpertCache<F> {
    let a = u.dot(&e.w0) + &e.b0;
    let g = a.mapv(gelu);
    let y = g.dot(&e.w1) + &e.b1;
    ExpertCache { a, g, y }
}

/// Two-layer feed-forward expert `gelu(u·W0 + b0)·W1 + b1`, frame-wise.
pub fn expert_forward<F: Real>(u: ArrayView2<F>, e: &Expert<F>) -> Array2<F> {
    expert_apply(u, e).y
}

/// Returns `du` and the expert's parameter gradient.
fn expert_backward<F: Real>(u: ArrayView2<F>, e: &Expert<F>, c: &ExpertCache<F>, dy: ArrayView2<F>) -> (Array2<F>, Expert<F>) {
    let dw1 = c.g.t().dot(&dy);
    let db1 = dy.sum_axis(Axis(0));
    let dg = dy.dot(&e.w1.t());
    let da = Zip::from(&dg).and(&c.a).map_collect(|&g, &a| g * gelu_grad(a));
    let dw0 = u.t().dot(&da);
    let db0 = da.sum_axis(Axis(0));
    let du = da.dot(&e.w0.t());
    (du, Expert { w0: dw0, b0: db0, w1: dw1, b1: db1 })
}

/// Three-layer gating network `d_c → d_m → d_m → K` with GELU between.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingNet<F> {
    pub l0: Linear<F>,
    pub l1: Linear<F>,
    pub l2: Linear<F>,
}

struct GateCache<F> {
    z0: Array1<F>,
    h0: Array1<F>,
    z1: Array1<F>,
    h1: Array1<F>,
    omega: Array1<F>,
}

impl<F: Real> GatingNet<F> {
    fn init<R: Rng + ?Sized>(d_c: usize, d_m: usize, k: usize, rng: &mut R) -> Self {
        Self {
            l0: Linear::init(d_c, d_m, true, MOC_INIT_STD, rng),
            l1: Linear::init(d_m, d_m, true, MOC_INIT_STD, rng),
            l2: Linear::init(d_m, k, true, MOC_INIT_STD, rng),
        }
    }

    pub fn logits(&self, e: ArrayView1<F>) -> Array1<F> {
        self.run(e).1
    }

    /// Blend weights `softmax(G(e))`.
    pub fn weights(&self, e: ArrayView1<F>) -> Array1<F> {
        self.run(e).0.omega
    }

    fn run(&self, e: ArrayView1<F>) -> (GateCache<F>, Array1<F>) {
        let z0 = self.l0.forward_vec(e);
        let h0 = z0.mapv(gelu);
        let z1 = self.l1.forward_vec(h0.view());
        let h1 = z1.mapv(gelu);
        let logits = self.l2.forward_vec(h1.view());
        let omega = softmax_vec(logits.view());
        (GateCache { z0, h0, z1, h1, omega }, logits)
    }

    fn backward(&self, e: ArrayView1<F>, c: &GateCache<F>, domega: ArrayView1<F>, mut grad: Option<&mut GatingNet<F>>) {
        let dlogits = softmax_row_backward(c.omega.view(), domega);
        let dh1 = self.l2.backward_vec(c.h1.view(), dlogits.view(), grad.as_deref_mut().map(|g| &mut g.l2));
        let dz1 = Zip::from(&dh1).and(&c.z1).map_collect(|&g, &z| g * gelu_grad(z));
        let dh0 = self.l1.backward_vec(c.h0.view(), dz1.view(), grad.as_deref_mut().map(|g| &mut g.l1));
        let dz0 = Zip::from(&dh0).and(&c.z0).map_collect(|&g, &z| g * gelu_grad(z));
        self.l0.backward_vec(e, dz0.view(), grad.as_deref_mut().map(|g| &mut g.l0));
    }
}

impl<F: Real> ParamTree<F> for GatingNet<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        self.l0.visit(&join(prefix, "0"), out);
        self.l1.visit(&join(prefix, "1"), out);
        self.l2.visit(&join(prefix, "2"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        self.l0.visit_mut(&join(prefix, "0"), out);
        self.l1.visit_mut(&join(prefix, "1"), out);
        self.l2.visit_mut(&join(prefix, "2"), out);
    }
}

/// Cross-attention projections: `W_q` (`d_m × d_m`), `W_k`, `W_v` (`d_c × d_m`).
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionParams<F> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
}

impl<F: Real> ParamTree<F> for CrossAttentionParams<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        self.wq.visit(&join(prefix, "q"), out);
        self.wk.visit(&join(prefix, "k"), out);
        self.wv.visit(&join(prefix, "v"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        self.wq.visit_mut(&join(prefix, "q"), out);
        self.wk.visit_mut(&join(prefix, "k"), out);
        self.wv.visit_mut(&join(prefix, "v"), out);
    }
}

/// Text side of one block call: token embeddings in the model's precision.
#[derive(Debug, Clone)]
pub struct TokenInput<F> {
    /// `n × d_c`
    pub emb: Array2<F>,
    pub valid: Vec<bool>,
    pub eos: usize,
}

impl<F: Real> TokenInput<F> {
    pub fn from_conditioning(c: &TextConditioning) -> Self {
        Self { emb: c.embeddings_as(), valid: c.token_mask.clone(), eos: c.eos_index }
    }
}

struct CrossCache<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    a: Array2<F>,
}

/// `f′ = f + softmax(Q·Kᵀ/√d_m)·V`, with invalid tokens masked out.
/// Returns `f′` and the attention map `A` (`l × n`).
pub fn cross_attend<F: Real>(
    f: ArrayView2<F>,
    tokens: &TokenInput<F>,
    p: &CrossAttentionParams<F>,
) -> Result<(Array2<F>, Array2<F>)> {
    let (fp, c) = cross_forward(f, tokens, p)?;
    Ok((fp, c.a))
}

fn cross_forward<F: Real>(
    f: ArrayView2<F>,
    tokens: &TokenInput<F>,
    p: &CrossAttentionParams<F>,
) -> Result<(Array2<F>, CrossCache<F>)> {
    if tokens.emb.ncols() != p.wk.d_in() || f.ncols() != p.wq.d_in() {
        return Err(Error::DimMismatch(format!(
            "features {} / tokens {} against projections {} / {}",
            f.ncols(),
            tokens.emb.ncols(),
            p.wq.d_in(),
            p.wk.d_in()
        )));
    }
    let q = p.wq.forward(f);
    let k = p.wk.forward(tokens.emb.view());
    let v = p.wv.forward(tokens.emb.view());
    let scale: F = lit(1.0 / (q.ncols() as f64).sqrt());
    let logits = q.dot(&k.t()) * scale;
    let mut a = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.outer_iter().enumerate() {
        a.row_mut(i).assign(&masked_softmax_row(row, &tokens.valid));
    }
    let fp = &f + &a.dot(&v);
    Ok((fp, CrossCache { q, k, v, a }))
}

/// `M_t = sigmoid(γ(A_t − β·max_valid A))` for one attention column.
pub fn attention_mask<F: Real>(col: ArrayView1<F>, valid: &[bool], gamma: f64, beta: f64) -> Array1<F> {
    let (_, max) = column_max(col, valid);
    col.mapv(|a| sigmoid(lit::<F>(gamma) * (a - lit::<F>(beta) * max)))
}

fn column_max<F: Real>(col: ArrayView1<F>, valid: &[bool]) -> (usize, F) {
    let mut best = (0, F::neg_infinity());
    for (t, (&a, &m)) in col.iter().zip(valid).enumerate() {
        if m && a > best.1 {
            best = (t, a);
        }
    }
    best
}

struct NormCache<F> {
    fhat: Array2<F>,
    inv_std: Array1<F>,
    scale: Array1<F>,
}

/// Per-channel normalization over valid frames, then `f̂ ⊙ scale + shift`.
pub fn ada_in<F: Real>(fp: ArrayView2<F>, valid: &[bool], scale: ArrayView1<F>, shift: ArrayView1<F>) -> Array2<F> {
    let (fhat, _) = instance_norm(fp, valid);
    &fhat * &scale + &shift
}

fn instance_norm<F: Real>(x: ArrayView2<F>, valid: &[bool]) -> (Array2<F>, Array1<F>) {
    let (l, d) = x.dim();
    let n = valid.iter().filter(|&&v| v).count().max(1) as f64;
    let mut fhat = Array2::zeros((l, d));
    let mut inv = Array1::zeros(d);
    for c in 0..d {
        let col = x.column(c);
        let mean = col.iter().zip(valid).filter(|(_, &v)| v).map(|(&a, _)| to_f64(a)).sum::<f64>() / n;
        let var = col.iter().zip(valid).filter(|(_, &v)| v).map(|(&a, _)| (to_f64(a) - mean).powi(2)).sum::<f64>() / n;
        let r = 1.0 / (var + ADA_IN_EPS).sqrt();
        inv[c] = lit(r);
        for t in 0..l {
            fhat[[t, c]] = lit((to_f64(col[t]) - mean) * r);
        }
    }
    (fhat, inv)
}

fn instance_norm_backward<F: Real>(fhat: &Array2<F>, inv: &Array1<F>, dy: &Array2<F>, valid: &[bool]) -> Array2<F> {
    let (l, d) = fhat.dim();
    let n = valid.iter().filter(|&&v| v).count().max(1) as f64;
    let mut dx = Array2::zeros((l, d));
    for c in 0..d {
        let (mut mg, mut mgy) = (0.0, 0.0);
        for t in (0..l).filter(|&t| valid[t]) {
            mg += to_f64(dy[[t, c]]);
            mgy += to_f64(dy[[t, c]]) * to_f64(fhat[[t, c]]);
        }
        mg /= n;
        mgy /= n;
        let r = to_f64(inv[c]);
        for t in (0..l).filter(|&t| valid[t]) {
            dx[[t, c]] = lit(r * (to_f64(dy[[t, c]]) - mg - to_f64(fhat[[t, c]]) * mgy));
        }
    }
    dx
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoCParams<F> {
    pub config: MoCConfig,
    pub down: Linear<F>,
    pub cross: CrossAttentionParams<F>,
    pub ada_scale: Linear<F>,
    pub ada_shift: Linear<F>,
    pub gate: GatingNet<F>,
    pub pool: ExpertPool<F>,
    pub up: Linear<F>,
}

impl<F: Real> ParamTree<F> for MoCParams<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        self.down.visit(&join(prefix, "down"), out);
        self.cross.visit(&join(prefix, "cross"), out);
        self.ada_scale.visit(&join(prefix, "ada.scale"), out);
        self.ada_shift.visit(&join(prefix, "ada.shift"), out);
        self.gate.visit(&join(prefix, "gate"), out);
        self.pool.visit(&join(prefix, "pool"), out);
        self.up.visit(&join(prefix, "up"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        self.down.visit_mut(&join(prefix, "down"), out);
        self.cross.visit_mut(&join(prefix, "cross"), out);
        self.ada_scale.visit_mut(&join(prefix, "ada.scale"), out);
        self.ada_shift.visit_mut(&join(prefix, "ada.shift"), out);
        self.gate.visit_mut(&join(prefix, "gate"), out);
        self.pool.visit_mut(&join(prefix, "pool"), out);
        self.up.visit_mut(&join(prefix, "up"), out);
    }
}

struct TokenCache<F> {
    token: usize,
    gate: GateCache<F>,
    expert: Expert<F>,
    ff: ExpertCache<F>,
    mask: Array1<F>,
    argmax: usize,
}

/// Activations of one [`MoCParams::forward`] call.
pub struct MoCCache<F> {
    h: Array2<F>,
    f: Array2<F>,
    cross: CrossCache<F>,
    norm: Option<NormCache<F>>,
    u: Array2<F>,
    tokens: Vec<TokenCache<F>>,
    r: Array2<F>,
    valid: Vec<bool>,
}

impl<F: Real> MoCParams<F> {
    pub fn init<R: Rng + ?Sized>(config: MoCConfig, d_model: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d_m, d_c) = (config.d_m, config.d_c);
        let conv = |d_in: usize, d_out: usize, rng: &mut R| {
            if config.use_zero_conv {
                Linear::zeros(d_in, d_out, true)
            } else {
                Linear::init(d_in, d_out, true, MOC_INIT_STD, rng)
            }
        };
        let down = conv(d_model, d_m, rng);
        let cross = CrossAttentionParams {
            wq: Linear::init(d_m, d_m, false, MOC_INIT_STD, rng),
            wk: Linear::init(d_c, d_m, false, MOC_INIT_STD, rng),
            wv: Linear::init(d_c, d_m, false, MOC_INIT_STD, rng),
        };
        let mut ada_scale = Linear::init(d_c, d_m, true, MOC_INIT_STD, rng);
        ada_scale.bias.as_mut().expect("bias").fill(F::one());
        let ada_shift = Linear::init(d_c, d_m, true, MOC_INIT_STD, rng);
        let gate = GatingNet::init(d_c, d_m, config.pool_size, rng);
        let pool = ExpertPool::init(config.pool_size, d_m, rng);
        let up = conv(d_m, d_model, rng);
        Ok(Self { config, down, cross, ada_scale, ada_shift, gate, pool, up })
    }

    pub fn d_model(&self) -> usize {
        self.down.d_in()
    }

    /// Residual `Σ_i r_i` projected back to `d_model` for one sequence `h`
    /// (`l × d_model`). Padded frames of the output are zero.
    pub fn forward(&self, h: ArrayView2<F>, tokens: &TokenInput<F>, valid: &[bool]) -> Result<(Array2<F>, MoCCache<F>)> {
        let cfg = &self.config;
        if h.ncols() != self.d_model() || valid.len() != h.nrows() {
            return Err(Error::DimMismatch(format!("block input {:?} with {} mask bits", h.dim(), valid.len())));
        }
        if tokens.valid.len() != tokens.emb.nrows() || tokens.eos >= tokens.emb.nrows() {
            return Err(Error::DimMismatch("token mask or eos index inconsistent with embeddings".into()));
        }
        let f = self.down.forward(h);
        let (fp, cross) = cross_forward(f.view(), tokens, &self.cross)?;
        let l = h.nrows();
        let d_m = cfg.d_m;

        if cfg.experts_as_plain_ffn {
            let e = self.pool.get(0);
            let ff = expert_apply(fp.view(), &e);
            let mut r = ff.y.clone();
            zero_rows(&mut r, valid);
            let mut out = self.up.forward(r.view());
            zero_rows(&mut out, valid);
            let tc = TokenCache {
                token: 0,
                gate: GateCache {
                    z0: Array1::zeros(0),
                    h0: Array1::zeros(0),
                    z1: Array1::zeros(0),
                    h1: Array1::zeros(0),
                    omega: Array1::ones(1),
                },
                expert: e,
                ff,
                mask: Array1::ones(l),
                argmax: 0,
            };
            let cache = MoCCache { h: h.to_owned(), f, cross, norm: None, u: fp, tokens: vec![tc], r, valid: valid.to_vec() };
            return Ok((out, cache));
        }

        let eos = tokens.emb.row(tokens.eos);
        let scale = self.ada_scale.forward_vec(eos);
        let shift = self.ada_shift.forward_vec(eos);
        let (fhat, inv_std) = instance_norm(fp.view(), valid);
        let u = &fhat * &scale + &shift;

        let mut r = Array2::zeros((l, d_m));
        let mut caches = Vec::new();
        for i in (0..tokens.emb.nrows()).filter(|&i| tokens.valid[i]) {
            let (gate, _) = self.gate.run(tokens.emb.row(i));
            let expert = self.pool.blend(gate.omega.view());
            let ff = expert_apply(u.view(), &expert);
            let col = cross.a.column(i);
            let (argmax, _) = column_max(col, valid);
            let mask = if cfg.use_attention_mask {
                attention_mask(col, valid, cfg.gamma, cfg.beta)
            } else {
                Array1::ones(l)
            };
            r += &(&ff.y * &mask.view().insert_axis(Axis(1)));
            caches.push(TokenCache { token: i, gate, expert, ff, mask, argmax });
        }
        zero_rows(&mut r, valid);
        let mut out = self.up.forward(r.view());
        zero_rows(&mut out, valid);
        let norm = Some(NormCache { fhat, inv_std, scale });
        Ok((out, MoCCache { h: h.to_owned(), f, cross, norm, u, tokens: caches, r, valid: valid.to_vec() }))
    }

    /// Gradient with respect to the block input `h`; parameter gradients are
    /// accumulated into `grad` when given.
    pub fn backward(&self, cache: &MoCCache<F>, tokens: &TokenInput<F>, dout: ArrayView2<F>, mut grad: Option<&mut MoCParams<F>>) -> Array2<F> {
        let cfg = &self.config;
        let valid = &cache.valid;
        let mut dout = dout.to_owned();
        zero_rows(&mut dout, valid);
        let mut dr = self.up.backward(cache.r.view(), dout.view(), grad.as_deref_mut().map(|g| &mut g.up));
        zero_rows(&mut dr, valid);

        let (l, n) = cache.cross.a.dim();
        let mut du = Array2::zeros(cache.u.raw_dim());
        let mut da = Array2::<F>::zeros((l, n));
        for tc in &cache.tokens {
            let m = tc.mask.view().insert_axis(Axis(1));
            let dy = &dr * &m;
            let (du_i, de) = expert_backward(cache.u.view(), &tc.expert, &tc.ff, dy.view());
            du += &du_i;
            if cfg.experts_as_plain_ffn {
                if let Some(g) = grad.as_deref_mut() {
                    g.pool.w0.index_axis_mut(Axis(0), 0).scaled_add(F::one(), &de.w0);
                    g.pool.b0.row_mut(0).scaled_add(F::one(), &de.b0);
                    g.pool.w1.index_axis_mut(Axis(0), 0).scaled_add(F::one(), &de.w1);
                    g.pool.b1.row_mut(0).scaled_add(F::one(), &de.b1);
                }
                continue;
            }
            let domega = self.pool.blend_backward(tc.gate.omega.view(), &de, grad.as_deref_mut().map(|g| &mut g.pool));
            self.gate.backward(tokens.emb.row(tc.token), &tc.gate, domega.view(), grad.as_deref_mut().map(|g| &mut g.gate));
            if cfg.use_attention_mask {
                let dm = (&dr * &tc.ff.y).sum_axis(Axis(1));
                let gamma: F = lit(cfg.gamma);
                let mut dmax = F::zero();
                for t in (0..l).filter(|&t| valid[t]) {
                    let mt = tc.mask[t];
                    let dz = dm[t] * mt * (F::one() - mt) * gamma;
                    da[[t, tc.token]] += dz;
                    dmax -= dz * lit(cfg.beta);
                }
                da[[tc.argmax, tc.token]] += dmax;
            }
        }

        let dfp = match &cache.norm {
            None => du,
            Some(nc) => {
                let eos = tokens.emb.row(tokens.eos);
                let mut dscale = Array1::<F>::zeros(cfg.d_m);
                let mut dshift = Array1::<F>::zeros(cfg.d_m);
                for t in (0..l).filter(|&t| valid[t]) {
                    dscale += &(&du.row(t) * &nc.fhat.row(t));
                    dshift += &du.row(t);
                }
                self.ada_scale.backward_vec(eos, dscale.view(), grad.as_deref_mut().map(|g| &mut g.ada_scale));
                self.ada_shift.backward_vec(eos, dshift.view(), grad.as_deref_mut().map(|g| &mut g.ada_shift));
                let dfhat = &du * &nc.scale;
                instance_norm_backward(&nc.fhat, &nc.inv_std, &dfhat, valid)
            }
        };

        // f′ = f + A·V
        let c = &cache.cross;
        let mut df = dfp.clone();
        da += &dfp.dot(&c.v.t());
        let dv = c.a.t().dot(&dfp);
        let scale: F = lit(1.0 / (cfg.d_m as f64).sqrt());
        let mut ds = Array2::zeros((l, n));
        for t in 0..l {
            ds.row_mut(t).assign(&(softmax_row_backward(c.a.row(t), da.row(t)) * scale));
        }
        let dq = ds.dot(&c.k);
        let dk = ds.t().dot(&c.q);
        df += &self.cross.wq.backward(cache.f.view(), dq.view(), grad.as_deref_mut().map(|g| &mut g.cross.wq));
        self.cross.wk.backward(tokens.emb.view(), dk.view(), grad.as_deref_mut().map(|g| &mut g.cross.wk));
        self.cross.wv.backward(tokens.emb.view(), dv.view(), grad.as_deref_mut().map(|g| &mut g.cross.wv));
        self.down.backward(cache.h.view(), df.view(), grad.as_deref_mut().map(|g| &mut g.down))
    }
}

fn zero_rows<F: Real>(a: &mut Array2<F>, valid: &[bool]) {
    for (mut row, &v) in a.outer_iter_mut().zip(valid) {
        if !v {
            row.fill(F::zero());
        }
    }
}
