//! Training objective: weighted reconstruction of the clean motion plus
//! velocity and foot-contact terms.
//!
//! All terms consume the padding mask. Normalizers are batch-wide: the
//! reconstruction term averages over every valid frame-feature, the velocity
//! term over every valid adjacent pair and feature, and the foot term over
//! valid adjacent pairs.

use ndarray::{s, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureLayout, SliceKind};
use crate::error::{Error, Result};
use crate::nn::{lit, to_f64, Real};
use crate::schedule::NoiseSchedule;

/// Per-timestep weight of the reconstruction term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LambdaRule {
    Constant { value: f64 },
    /// `min(SNR_t, cap)` with `SNR_t = ᾱ_t / (1 − ᾱ_t)`.
    MinSnr { cap: f64 },
}

impl Default for LambdaRule {
    fn default() -> Self {
        Self::Constant { value: 1.0 }
    }
}

impl LambdaRule {
    pub fn weight(&self, t: usize, schedule: &NoiseSchedule) -> f64 {
        match *self {
            Self::Constant { value } => value,
            Self::MinSnr { cap } => {
                let ab = schedule.alpha_bar(t);
                if ab >= 1.0 {
                    cap
                } else {
                    (ab / (1.0 - ab)).min(cap)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default)]
    pub lambda_t: LambdaRule,
    pub lambda_vel: f64,
    pub lambda_foot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_t: LambdaRule::default(), lambda_vel: 30.0, lambda_foot: 30.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lt_ok = match self.lambda_t {
            LambdaRule::Constant { value } => value >= 0.0,
            LambdaRule::MinSnr { cap } => cap > 0.0,
        };
        if !lt_ok || self.lambda_vel < 0.0 || self.lambda_foot < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossReport {
    pub simple: f64,
    pub vel: f64,
    pub foot: f64,
    pub total: f64,
    pub n_frames: usize,
    pub n_pairs: usize,
}

fn check_shapes<F>(x: &ArrayView3<F>, x0: &ArrayView3<F>, mask: &ArrayView2<bool>) -> Result<()> {
    let (b, l, _) = x.dim();
    if x.dim() != x0.dim() || mask.dim() != (b, l) {
        return Err(Error::ShapeMismatch(format!(
            "x {:?}, prediction {:?}, mask {:?}",
            x.dim(),
            x0.dim(),
            mask.dim()
        )));
    }
    Ok(())
}

fn pair_valid(mask: &ArrayView2<bool>, b: usize, i: usize) -> bool {
    mask[[b, i]] && mask[[b, i + 1]]
}

fn count_pairs(mask: &ArrayView2<bool>) -> usize {
    let (bn, l) = mask.dim();
    (0..bn).map(|b| (0..l.saturating_sub(1)).filter(|&i| pair_valid(mask, b, i)).count()).sum()
}

/// `Σ_b λ_b Σ_valid (x − x̂)² / (N_valid · D)`, with `lambdas` holding one
/// weight per batch item.
pub fn loss_simple<F: Real>(
    x: ArrayView3<F>,
    x0: ArrayView3<F>,
    lambdas: &[f64],
    mask: ArrayView2<bool>,
    grad: Option<&mut Array3<F>>,
    scale: f64,
) -> Result<f64> {
    check_shapes(&x, &x0, &mask)?;
    let (bn, l, d) = x.dim();
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Ok(0.0);
    }
    let norm = 1.0 / (n * d) as f64;
    let mut sum = 0.0;
    let mut grad = grad;
    for b in 0..bn {
        for i in (0..l).filter(|&i| mask[[b, i]]) {
            for c in 0..d {
                let e = to_f64(x0[[b, i, c]]) - to_f64(x[[b, i, c]]);
                sum += lambdas[b] * e * e;
                if let Some(g) = grad.as_deref_mut() {
                    g[[b, i, c]] += lit(scale * 2.0 * lambdas[b] * e * norm);
                }
            }
        }
    }
    Ok(sum * norm)
}

/// Mean squared error between first temporal differences over valid
/// adjacent pairs.
pub fn loss_velocity<F: Real>(
    x: ArrayView3<F>,
    x0: ArrayView3<F>,
    mask: ArrayView2<bool>,
    grad: Option<&mut Array3<F>>,
    scale: f64,
) -> Result<f64> {
    check_shapes(&x, &x0, &mask)?;
    let (bn, l, d) = x.dim();
    let pairs = count_pairs(&mask);
    if pairs == 0 {
        return Ok(0.0);
    }
    let norm = 1.0 / (pairs * d) as f64;
    let mut sum = 0.0;
    let mut grad = grad;
    for b in 0..bn {
        for i in (0..l - 1).filter(|&i| pair_valid(&mask, b, i)) {
            for c in 0..d {
                let dp = to_f64(x0[[b, i + 1, c]]) - to_f64(x0[[b, i, c]]);
                let dt = to_f64(x[[b, i + 1, c]]) - to_f64(x[[b, i, c]]);
                let e = dp - dt;
                sum += e * e;
                if let Some(g) = grad.as_deref_mut() {
                    let ge: F = lit(scale * 2.0 * e * norm);
                    g[[b, i + 1, c]] += ge;
                    g[[b, i, c]] -= ge;
                }
            }
        }
    }
    Ok(sum * norm)
}

/// Mean over valid adjacent pairs of `‖v_feet ⊙ contact‖²`, where `v_feet`
/// is the frame-to-frame displacement of the predicted foot-joint positions
/// and `contact` comes from the ground-truth contact channels at the earlier
/// frame.
pub fn loss_foot_contact<F: Real>(
    x: ArrayView3<F>,
    x0: ArrayView3<F>,
    mask: ArrayView2<bool>,
    layout: &FeatureLayout,
    grad: Option<&mut Array3<F>>,
    scale: f64,
) -> Result<f64> {
    check_shapes(&x, &x0, &mask)?;
    let feet = layout.foot_joints.ok_or(Error::LayoutMissingFeet)?;
    if x.dim().2 != layout.dim() {
        return Err(Error::DimensionMismatch { expected: layout.dim(), found: x.dim().2 });
    }
    let contacts = layout.slice(SliceKind::FootContacts);
    let (bn, l, _) = x.dim();
    let pairs = count_pairs(&mask);
    if pairs == 0 {
        return Ok(0.0);
    }
    let norm = 1.0 / pairs as f64;
    let mut sum = 0.0;
    let mut grad = grad;
    for b in 0..bn {
        for i in (0..l - 1).filter(|&i| pair_valid(&mask, b, i)) {
            for (k, &joint) in feet.iter().enumerate() {
                let c = to_f64(x[[b, i, contacts.start + k]]);
                if c == 0.0 {
                    continue;
                }
                for col in layout.joint_position(joint) {
                    let v = to_f64(x0[[b, i + 1, col]]) - to_f64(x0[[b, i, col]]);
                    sum += (v * c) * (v * c);
                    if let Some(g) = grad.as_deref_mut() {
                        let gv: F = lit(scale * 2.0 * v * c * c * norm);
                        g[[b, i + 1, col]] += gv;
                        g[[b, i, col]] -= gv;
                    }
                }
            }
        }
    }
    Ok(sum * norm)
}

/// Combined objective `simple + λ_vel·vel + λ_foot·foot` and, when `grad` is
/// given, its gradient with respect to the prediction (accumulated).
pub fn total_loss<F: Real>(
    x: ArrayView3<F>,
    x0: ArrayView3<F>,
    t: &[usize],
    mask: ArrayView2<bool>,
    weights: &LossWeights,
    layout: &FeatureLayout,
    schedule: &NoiseSchedule,
    grad: Option<&mut Array3<F>>,
) -> Result<LossReport> {
    check_shapes(&x, &x0, &mask)?;
    if t.len() != x.len_of(Axis(0)) {
        return Err(Error::ShapeMismatch("one timestep per batch item required".into()));
    }
    let lambdas: Vec<f64> = t.iter().map(|&t| weights.lambda_t.weight(t, schedule)).collect();
    let mut grad = grad;
    let simple = loss_simple(x, x0, &lambdas, mask, grad.as_deref_mut(), 1.0)?;
    let vel = loss_velocity(x, x0, mask, grad.as_deref_mut(), weights.lambda_vel)?;
    let foot = if weights.lambda_foot == 0.0 && layout.foot_joints.is_none() {
        0.0
    } else {
        loss_foot_contact(x, x0, mask, layout, grad.as_deref_mut(), weights.lambda_foot)?
    };
    Ok(LossReport {
        simple,
        vel,
        foot,
        total: simple + weights.lambda_vel * vel + weights.lambda_foot * foot,
        n_frames: mask.iter().filter(|&&m| m).count(),
        n_pairs: count_pairs(&mask),
    })
}

/// Zeroes every padded frame of `a`.
pub fn apply_mask<F: Real>(a: &mut Array3<F>, mask: ArrayView2<bool>) {
    for ((b, i), &m) in mask.indexed_iter() {
        if !m {
            a.slice_mut(s![b, i, ..]).fill(F::zero());
        }
    }
}
