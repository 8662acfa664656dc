//! Conditional denoiser: a frozen pretrained backbone plus a trainable branch
//! of per-layer copies whose outputs reach the frozen stack through MoC blocks.

use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::backbone::{Block, BlockCache, DenoiserParams, HeadCache, Rope};
use crate::error::{Error, Result};
use crate::moc::{MoCCache, MoCConfig, MoCParams, TokenInput};
use crate::nn::{all_finite, join, ParamTree, Real};
use crate::schedule::Denoiser;

/// Everything the optimizer may touch.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBranch<F> {
    pub copy: Vec<Block<F>>,
    pub moc: Vec<MoCParams<F>>,
}

impl<F: Real> ParamTree<F> for ControlBranch<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        self.copy.visit(&join(prefix, "copy"), out);
        self.moc.visit(&join(prefix, "moc"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        self.copy.visit_mut(&join(prefix, "copy"), out);
        self.moc.visit_mut(&join(prefix, "moc"), out);
    }
}

#[derive(Debug, Clone)]
pub struct ControlNetParams<F> {
    pub frozen: Arc<DenoiserParams<F>>,
    /// Checksum of `frozen` taken when the network was built.
    pub frozen_checksum: String,
    pub branch: ControlBranch<F>,
}

/// Activations of one [`ControlNetParams::forward_item`] call.
pub struct ControlCache<F> {
    rope: Rope<F>,
    frozen: Vec<BlockCache<F>>,
    copy: Vec<BlockCache<F>>,
    moc: Vec<MoCCache<F>>,
    head: HeadCache<F>,
}

impl<F: Real> ControlNetParams<F> {
    /// Copies every transformer layer of `frozen` and attaches a freshly
    /// initialized MoC block to each.
    pub fn build<R: Rng + ?Sized>(frozen: Arc<DenoiserParams<F>>, moc: MoCConfig, rng: &mut R) -> Result<Self> {
        moc.validate()?;
        let d_model = frozen.config.d_model;
        let blocks = (0..frozen.layers.len()).map(|_| MoCParams::init(moc, d_model, rng)).collect::<Result<_>>()?;
        let branch = ControlBranch { copy: frozen.layers.clone(), moc: blocks };
        Ok(Self { frozen_checksum: frozen.checksum(), frozen, branch })
    }

    /// Reassembles a network from stored parts, checking the frozen tensors
    /// against the checksum recorded with them.
    pub fn from_parts(frozen: Arc<DenoiserParams<F>>, branch: ControlBranch<F>, frozen_checksum: String) -> Result<Self> {
        let n = frozen.layers.len();
        if branch.copy.len() != n || branch.moc.len() != n {
            return Err(Error::CheckpointMismatch(format!(
                "branch has {} copies and {} MoC blocks for {n} layers",
                branch.copy.len(),
                branch.moc.len()
            )));
        }
        let net = Self { frozen, frozen_checksum, branch };
        net.verify_integrity()?;
        Ok(net)
    }

    pub fn moc_config(&self) -> MoCConfig {
        self.branch.moc[0].config
    }

    pub fn verify_integrity(&self) -> Result<()> {
        let now = self.frozen.checksum();
        if now != self.frozen_checksum {
            return Err(Error::CheckpointMismatch(format!(
                "frozen weights changed: checksum {now} differs from recorded {}",
                self.frozen_checksum
            )));
        }
        Ok(())
    }

    /// Layer `l` output is `frozen_l(h) + moc_l(copy_l(h))`.
    pub fn forward_item(
        &self,
        x_t: ArrayView2<F>,
        t: usize,
        mask: &[bool],
        tokens: &TokenInput<F>,
    ) -> Result<(Array2<F>, ControlCache<F>)> {
        let base = &*self.frozen;
        let cfg = &base.config;
        let (len, dim) = x_t.dim();
        base.check_len(len)?;
        if dim != cfg.input_dim || mask.len() != len {
            return Err(Error::ShapeMismatch(format!("input {len}×{dim} with mask of {}", mask.len())));
        }
        if tokens.emb.ncols() != self.moc_config().d_c {
            return Err(Error::DimMismatch(format!(
                "token width {} but MoC expects {}",
                tokens.emb.ncols(),
                self.moc_config().d_c
            )));
        }
        let time = base.embed_time(t);
        let rope = Rope::sequential(cfg.d_head, len)?;
        let n = base.layers.len();
        let (mut frozen, mut copy, mut moc) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        let mut h = base.input.forward(x_t);
        for l in 0..n {
            let sc = time.silu_c.view();
            let (hf, fc) = base.layers[l].forward(h.view(), sc, mask, cfg.n_heads, &rope);
            let (hc, cc) = self.branch.copy[l].forward(h.view(), sc, mask, cfg.n_heads, &rope);
            let (r, mc) = self.branch.moc[l].forward(hc.view(), tokens, mask)?;
            h = hf + r;
            if !all_finite(h.view()) {
                return Err(Error::NonFiniteActivation(format!("control layer {l}")));
            }
            frozen.push(fc);
            copy.push(cc);
            moc.push(mc);
        }
        let (out, head) = base.head_forward(h.view(), time.silu_c.view(), mask);
        if !all_finite(out.view()) {
            return Err(Error::NonFiniteActivation("output".into()));
        }
        Ok((out, ControlCache { rope, frozen, copy, moc, head }))
    }

    /// Accumulates branch gradients only; the frozen path is traversed for
    /// its input gradient and nothing else.
    pub fn backward_item(&self, cache: &ControlCache<F>, tokens: &TokenInput<F>, dy: ArrayView2<F>, grad: &mut ControlBranch<F>) {
        let base = &*self.frozen;
        let (mut dh, _) = base.head_backward(&cache.head, dy, None);
        for l in (0..base.layers.len()).rev() {
            let (mut dprev, _) = base.layers[l].backward(&cache.frozen[l], dh.view(), &cache.rope, None);
            let dhc = self.branch.moc[l].backward(&cache.moc[l], tokens, dh.view(), Some(&mut grad.moc[l]));
            let (dcopy, _) = self.branch.copy[l].backward(&cache.copy[l], dhc.view(), &cache.rope, Some(&mut grad.copy[l]));
            dprev += &dcopy;
            dh = dprev;
        }
        // input projection and timestep embedding stay frozen
    }

    /// Batched forward where item `i` is conditioned on `tokens[i]`.
    pub fn denoise_batch(
        &self,
        x_t: ArrayView3<F>,
        t: &[usize],
        mask: ArrayView2<bool>,
        tokens: &[&TokenInput<F>],
    ) -> Result<Array3<F>> {
        let (b, len, dim) = x_t.dim();
        if t.len() != b || mask.dim() != (b, len) || tokens.len() != b {
            return Err(Error::ShapeMismatch("timesteps, mask and tokens must match the batch".into()));
        }
        let outs: Vec<Array2<F>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let m: Vec<bool> = mask.row(i).to_vec();
                self.forward_item(x_t.index_axis(Axis(0), i), t[i], &m, tokens[i]).map(|(y, _)| y)
            })
            .collect::<Result<_>>()?;
        let mut out = Array3::zeros((b, len, dim));
        for (i, y) in outs.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&y);
        }
        Ok(out)
    }
}

/// The conditional denoiser with one prompt bound to every batch item.
pub struct Conditioned<'a, F> {
    pub net: &'a ControlNetParams<F>,
    pub tokens: &'a TokenInput<F>,
}

impl<F: Real> Denoiser<F> for Conditioned<'_, F> {
    fn denoise(&self, x_t: ArrayView3<F>, t: &[usize], mask: ArrayView2<bool>) -> Result<Array3<F>> {
        let tokens = vec![self.tokens; t.len()];
        self.net.denoise_batch(x_t, t, mask, &tokens)
    }
}
