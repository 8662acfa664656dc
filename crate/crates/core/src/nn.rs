//! Dense building blocks with hand-written backward passes.
//!
//! Every layer works on one sequence at a time (`rows × features`). Batches
//! are handled by the callers, which run items independently and reduce
//! gradients in item order so results do not depend on thread scheduling.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Floating point element type. Models run in `f32`; gradient checks and
/// reference computations instantiate the same code with `f64`.
pub trait Real: NdFloat + std::iter::Sum + Default + 'static {}
impl<T: NdFloat + std::iter::Sum + Default + 'static> Real for T {}

#[inline]
pub fn lit<F: Real>(x: f64) -> F {
    F::from(x).expect("literal representable")
}

#[inline]
pub fn to_f64<F: Real>(x: F) -> f64 {
    x.to_f64().expect("finite cast")
}

/// Dotted tensor name under `prefix`.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A named collection of parameter tensors. Gradients and optimizer moments
/// reuse the same type, so walking two trees in lockstep pairs every tensor
/// with its gradient.
pub trait ParamTree<F: Real> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>);

    fn named(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn fill(&mut self, value: F) {
        for (_, mut t) in self.named_mut() {
            t.fill(value);
        }
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: F)
    where
        Self: Sized,
    {
        let src = other.named();
        for ((_, mut dst), (_, s)) in self.named_mut().into_iter().zip(src) {
            dst.scaled_add(scale, &s);
        }
    }

    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut out = self.clone();
        out.fill(F::zero());
        out
    }

    /// Sum of squares over every tensor, accumulated in `f64`.
    fn sq_norm(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, t)| t.iter().map(|&v| to_f64(v) * to_f64(v)).collect::<Vec<_>>())
            .sum()
    }

    fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over names, shapes and the `f32` little-endian payloads.
    fn checksum(&self) -> String {
        checksum_tensors(self.named().iter().map(|(n, t)| (n.as_str(), t.view())))
    }
}

pub fn checksum_tensors<'a, F: Real>(
    tensors: impl Iterator<Item = (&'a str, ArrayViewD<'a, F>)>,
) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u32).to_le_bytes());
        }
        for &v in t.iter() {
            h.update(v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    hex_digest(&h.finalize())
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl<F: Real, T: ParamTree<F>> ParamTree<F> for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), out);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Truncated normal draw (rejection at two standard deviations).
pub fn trunc_normal<F: Real, R: Rng + ?Sized>(rng: &mut R, std: f64) -> F {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return lit(z * std);
        }
    }
}

pub fn trunc_normal_matrix<F: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || trunc_normal(rng, std))
}

/// Affine map `y = x W + b` with `W` stored input-major (`in × out`).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Option<Array1<F>>,
}

impl<F: Real> Linear<F> {
    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: Array2::zeros((d_in, d_out)),
            bias: bias.then(|| Array1::zeros(d_out)),
        }
    }

    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, bias: bool, std: f64, rng: &mut R) -> Self {
        Self {
            weight: trunc_normal_matrix(d_in, d_out, std, rng),
            bias: bias.then(|| Array1::zeros(d_out)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    pub fn forward_vec(&self, x: ArrayView1<F>) -> Array1<F> {
        let mut y = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Accumulates parameter gradients into `grad` (when given) and returns
    /// the gradient with respect to the input.
    pub fn backward(&self, x: ArrayView2<F>, dy: ArrayView2<F>, grad: Option<&mut Linear<F>>) -> Array2<F> {
        if let Some(g) = grad {
            general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut g.weight);
            if let Some(gb) = g.bias.as_mut() {
                *gb += &dy.sum_axis(Axis(0));
            }
        }
        dy.dot(&self.weight.t())
    }

    pub fn backward_vec(&self, x: ArrayView1<F>, dy: ArrayView1<F>, grad: Option<&mut Linear<F>>) -> Array1<F> {
        if let Some(g) = grad {
            let outer = x
                .view()
                .insert_axis(Axis(1))
                .dot(&dy.view().insert_axis(Axis(0)));
            g.weight += &outer;
            if let Some(gb) = g.bias.as_mut() {
                *gb += &dy;
            }
        }
        self.weight.dot(&dy)
    }
}

impl<F: Real> ParamTree<F> for Linear<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        out.push((join(prefix, "weight"), self.weight.view().into_dyn()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.view().into_dyn()));
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        out.push((join(prefix, "weight"), self.weight.view_mut().into_dyn()));
        if let Some(b) = self.bias.as_mut() {
            out.push((join(prefix, "bias"), b.view_mut().into_dyn()));
        }
    }
}

pub const LN_EPS: f64 = 1e-6;

/// Row-wise layer norm without affine parameters. Returns the normalized
/// rows and each row's inverse standard deviation.
pub fn layer_norm<F: Real>(x: ArrayView2<F>) -> (Array2<F>, Array1<F>) {
    let (n, d) = x.dim();
    let mut y = Array2::zeros((n, d));
    let mut inv = Array1::zeros(n);
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.iter().map(|&v| to_f64(v)).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (to_f64(v) - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        inv[i] = lit(r);
        for (o, &v) in y.row_mut(i).iter_mut().zip(row.iter()) {
            *o = lit((to_f64(v) - mean) * r);
        }
    }
    (y, inv)
}

pub fn layer_norm_backward<F: Real>(y: ArrayView2<F>, inv: ArrayView1<F>, dy: ArrayView2<F>) -> Array2<F> {
    let (n, d) = y.dim();
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let yr = y.row(i);
        let gr = dy.row(i);
        let mean_g = gr.iter().map(|&v| to_f64(v)).sum::<f64>() / d as f64;
        let mean_gy = gr.iter().zip(yr.iter()).map(|(&g, &v)| to_f64(g) * to_f64(v)).sum::<f64>() / d as f64;
        let r = to_f64(inv[i]);
        for j in 0..d {
            dx[[i, j]] = lit(r * (to_f64(gr[j]) - mean_g - to_f64(yr[j]) * mean_gy));
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let c = lit::<F>(GELU_C);
    let a = lit::<F>(GELU_A);
    let half = lit::<F>(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = lit::<F>(GELU_C);
    let a = lit::<F>(GELU_A);
    let half = lit::<F>(0.5);
    let three = lit::<F>(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + three * a * x * x)
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

/// Softmax over a row restricted to `valid` entries; invalid entries get
/// exactly zero probability. At least one entry must be valid.
pub fn masked_softmax_row<F: Real>(logits: ArrayView1<F>, valid: &[bool]) -> Array1<F> {
    let mut max = F::neg_infinity();
    for (&v, &ok) in logits.iter().zip(valid) {
        if ok && v > max {
            max = v;
        }
    }
    let mut out = Array1::zeros(logits.len());
    let mut sum = 0.0f64;
    for (i, (&v, &ok)) in logits.iter().zip(valid).enumerate() {
        if ok {
            let e = (v - max).exp();
            out[i] = e;
            sum += to_f64(e);
        }
    }
    let inv = lit::<F>(1.0 / sum);
    out.mapv_inplace(|p| p * inv);
    out
}

/// Backward of a softmax row given its probabilities.
pub fn softmax_row_backward<F: Real>(p: ArrayView1<F>, dp: ArrayView1<F>) -> Array1<F> {
    let dot: F = p.iter().zip(dp.iter()).map(|(&a, &b)| a * b).sum();
    Array1::from_shape_fn(p.len(), |i| p[i] * (dp[i] - dot))
}

pub fn softmax_vec<F: Real>(logits: ArrayView1<F>) -> Array1<F> {
    let valid = vec![true; logits.len()];
    masked_softmax_row(logits, &valid)
}

pub fn all_finite<F: Real>(a: ArrayView2<F>) -> bool {
    a.iter().all(|v| v.is_finite())
}
