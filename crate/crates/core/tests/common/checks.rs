//! Measurements shared by the focused tests and the acceptance report. Each
//! returns the observed quantity; callers decide the tolerance.

use std::sync::Arc;

use motif_core::backbone::{rotary_scores, DenoiserParams, ModelConfig, Preset};
use motif_core::controlnet::{ControlBranch, ControlNetParams};
use motif_core::data::{draw_window, draw_window_len, DatasetIndex, FeatureLayout, SliceKind};
use motif_core::losses::{total_loss, LossWeights};
use motif_core::moc::{attention_mask, Ablation, ExpertPool, MoCConfig, MoCParams, TokenInput};
use motif_core::nn::{join, ParamTree};
use motif_core::schedule::{gaussian, sample, NoiseSchedule, SamplerConfig, MAX_BETA};
use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::oracle::{moc_oracle, random_block, rows, sigmoid};
use super::{grad_errors, perturb, worst};

fn max_abs<'a>(it: impl IntoIterator<Item = &'a f64>) -> f64 {
    it.into_iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Largest deviation between the block and the scalar oracle.
pub fn moc_oracle_deviation(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dev = 0.0f64;
    for _ in 0..instances {
        let p = random_block(&mut rng);
        let h: Array2<f64> = gaussian((4, 10), &mut rng);
        let tokens = TokenInput { emb: gaussian((2, 6), &mut rng), valid: vec![true, true], eos: 1 };
        let valid = if rng.random_bool(0.5) { vec![true; 4] } else { vec![true, true, true, false] };
        let (got, _) = p.forward(h.view(), &tokens, &valid).unwrap();
        let want = moc_oracle(&p, &rows(h.view()), &tokens, &valid);
        for (gr, wr) in got.outer_iter().zip(&want) {
            for (g, w) in gr.iter().zip(wr) {
                dev = dev.max((g - w).abs());
            }
        }
    }
    dev
}

pub struct BlendReport {
    /// Worst |Σω − 1| over random gate inputs.
    pub sum_dev: f64,
    pub single_exact: bool,
    /// Distance of a saturated blend from the selected expert.
    pub saturated_dev: f64,
}

pub fn blend_report() -> BlendReport {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_block(&mut rng);
    let mut sum_dev = 0.0f64;
    for _ in 0..20 {
        let e: Array1<f64> = gaussian(6, &mut rng);
        let w = p.gate.weights(e.view());
        assert!(w.iter().all(|&x| x >= 0.0));
        sum_dev = sum_dev.max((w.sum() - 1.0).abs());
    }
    let single = ExpertPool::<f64>::init(1, 4, &mut rng);
    let single_exact = single.blend(Array1::ones(1).view()) == single.get(0);
    let mut sat = p.clone();
    sat.gate.l2.bias.as_mut().unwrap()[1] = 60.0;
    let e: Array1<f64> = gaussian(6, &mut rng);
    let blended = sat.pool.blend(sat.gate.weights(e.view()).view());
    let target = sat.pool.get(1);
    let saturated_dev = max_abs(
        (&blended.w0 - &target.w0)
            .iter()
            .chain((&blended.w1 - &target.w1).iter())
            .chain((&blended.b0 - &target.b0).iter())
            .chain((&blended.b1 - &target.b1).iter()),
    );
    BlendReport { sum_dev, single_exact, saturated_dev }
}

/// Mask at β·max and |mask(max) − σ(γ(1 − β))| for γ = 24, β = 0.25.
pub fn mask_values() -> (f64, f64) {
    let col = Array1::from(vec![0.25f64, 1.0, 0.5]);
    let m = attention_mask(col.view(), &[true; 3], 24.0, 0.25);
    (m[0], (m[1] - sigmoid(18.0)).abs())
}

fn chi_square_p(counts: &[f64], probs: &[f64]) -> f64 {
    let n: f64 = counts.iter().sum();
    let chi2: f64 = counts.iter().zip(probs).map(|(c, p)| (c - n * p).powi(2) / (n * p)).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(chi2)
}

/// p-value of window lengths on a long clip against the uniform law.
pub fn window_length_p(draws: usize, l_max: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut counts = vec![0.0f64; l_max];
    for _ in 0..draws {
        counts[draw_window_len(1000, 3, l_max, &mut rng) - 1] += 1.0;
    }
    chi_square_p(&counts, &vec![1.0 / l_max as f64; l_max])
}

/// p-value of window lengths over a mixed-length dataset against the law
/// obtained by enumerating every (start, length) pair.
pub fn dataset_window_p(draws: usize) -> f64 {
    let index = DatasetIndex::from_lengths([("a", 7), ("b", 30), ("c", 2)]);
    let l_max = 10;
    let mut expect = vec![0.0f64; l_max];
    for c in &index.clips {
        for s in 0..c.n_frames {
            let hi = l_max.min(c.n_frames - s);
            for l in 1..=hi {
                expect[l - 1] += 1.0 / (index.total_frames as f64 * hi as f64);
            }
        }
    }
    let mut counts = vec![0.0f64; l_max];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..draws {
        let w = draw_window(&index, l_max, &mut rng).unwrap();
        assert!(w.start + w.len <= index.clips[w.clip].n_frames);
        counts[w.len - 1] += 1.0;
    }
    chi_square_p(&counts, &expect)
}

/// Out-of-range windows over random indices and window caps.
pub fn fuzz_window_violations(draws: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut done, mut bad) = (0, 0);
    while done < draws {
        let lens: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(1..50)).collect();
        let names: Vec<String> = (0..lens.len()).map(|i| i.to_string()).collect();
        let index = DatasetIndex::from_lengths(names.iter().map(|s| s.as_str()).zip(lens.iter().copied()));
        let l_max = rng.random_range(1..70);
        for _ in 0..1000.min(draws - done) {
            let w = draw_window(&index, l_max, &mut rng).unwrap();
            if w.len == 0 || w.len > l_max || w.start + w.len > lens[w.clip] {
                bad += 1;
            }
            done += 1;
        }
    }
    bad
}

/// Whether ᾱ decreases strictly and β stays inside (0, MAX_BETA].
pub fn schedule_well_formed(t_max: usize) -> bool {
    let sched = NoiseSchedule::cosine(t_max);
    (1..=t_max).all(|t| {
        let b = sched.beta(t);
        sched.alpha_bar(t) < sched.alpha_bar(t - 1) && b > 0.0 && b <= MAX_BETA + 1e-12
    })
}

/// Worst DDIM error when the denoiser always answers the clean target.
pub fn ddim_oracle_error(steps: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let target: Array2<f64> = gaussian((6, 5), &mut rng);
    let oracle = |x: ArrayView3<f64>, _: &[usize], _: ArrayView2<bool>| -> motif_core::Result<Array3<f64>> {
        Ok(target.clone().insert_axis(ndarray::Axis(0)).broadcast(x.raw_dim()).unwrap().to_owned())
    };
    let sched = NoiseSchedule::cosine(1000);
    let cfg = SamplerConfig { n_steps: steps, guidance: 1.0, eta: 0.0 };
    let x = sample::<f64, _>(&oracle, None, &cfg, &sched, 6, 5, &mut rng).unwrap();
    max_abs((&x - &target).iter())
}

/// Worst change in rotary attention scores under position shifts.
pub fn rope_shift_deviation() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q: Array3<f64> = gaussian((2, 5, 8), &mut rng);
    let k: Array3<f64> = gaussian((2, 5, 8), &mut rng);
    let pos: Vec<f64> = (0..5).map(|i| i as f64 * 1.5).collect();
    let base = rotary_scores(q.view(), k.view(), &pos).unwrap();
    [1.0, 7.0, 123.0]
        .iter()
        .map(|shift| {
            let moved: Vec<f64> = pos.iter().map(|p| p + shift).collect();
            max_abs((&rotary_scores(q.view(), k.view(), &moved).unwrap() - &base).iter())
        })
        .fold(0.0, f64::max)
}

/// Worst per-tensor relative gradient error of the backbone on one instance.
pub fn backbone_gradient(seed: u64) -> (String, f64) {
    let cfg = ModelConfig { max_len: 16, ..ModelConfig::preset(Preset::Tiny, 59) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: DenoiserParams<f64> = DenoiserParams::init(cfg, &mut rng).unwrap();
    perturb(&mut p, 0.1, &mut rng);
    let x: Array2<f64> = gaussian((6, 59), &mut rng);
    let w: Array2<f64> = gaussian((6, 59), &mut rng);
    let mask = [true, true, true, true, false, false];
    let t = rng.random_range(1..1000);
    let loss = |q: &DenoiserParams<f64>| (&q.forward_item(x.view(), t, &mask).unwrap().0 * &w).sum();
    let (_, cache) = p.forward_item(x.view(), t, &mask).unwrap();
    let mut g = p.zeroed();
    p.backward_item(&cache, w.view(), &mut g);
    worst(&grad_errors(&p, &g, loss, 6, &mut rng))
}

fn moc_instance(cfg: MoCConfig, seed: u64) -> (MoCParams<f64>, Array2<f64>, TokenInput<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = MoCParams::init(cfg, 12, &mut rng).unwrap();
    perturb(&mut p, 0.3, &mut rng);
    let h: Array2<f64> = gaussian((4, 12), &mut rng);
    let tokens = TokenInput { emb: gaussian((2, cfg.d_c), &mut rng), valid: vec![true; 2], eos: 1 };
    let w: Array2<f64> = gaussian((4, 12), &mut rng);
    (p, h, tokens, w)
}

fn tiny_moc() -> MoCConfig {
    MoCConfig { d_m: 8, pool_size: 3, d_c: 6, ..Default::default() }
}

/// Parameter gradients of the MoC block under one ablation.
pub fn moc_gradient(ablation: Ablation, seed: u64) -> (String, f64) {
    let (p, h, tokens, w) = moc_instance(tiny_moc().with_ablation(ablation), seed);
    let valid = [true, true, true, false];
    let loss = |q: &MoCParams<f64>| (&q.forward(h.view(), &tokens, &valid).unwrap().0 * &w).sum();
    let (_, cache) = p.forward(h.view(), &tokens, &valid).unwrap();
    let mut g = p.zeroed();
    p.backward(&cache, &tokens, w.view(), Some(&mut g));
    worst(&grad_errors(&p, &g, loss, 12, &mut ChaCha8Rng::seed_from_u64(seed)))
}

#[derive(Clone)]
pub struct Tensor(pub ndarray::ArrayD<f64>);

impl ParamTree<f64> for Tensor {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((join(prefix, "x"), self.0.view()));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        out.push((join(prefix, "x"), self.0.view_mut()));
    }
}

/// Gradient of the MoC block with respect to its input hidden states.
pub fn moc_input_gradient(seed: u64) -> f64 {
    let (p, h, tokens, w) = moc_instance(tiny_moc(), seed);
    let valid = [true; 4];
    let (_, cache) = p.forward(h.view(), &tokens, &valid).unwrap();
    let dh = p.backward(&cache, &tokens, w.view(), None);
    let loss = |x: &Tensor| {
        let x2 = x.0.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        (&p.forward(x2.view(), &tokens, &valid).unwrap().0 * &w).sum()
    };
    let errs = grad_errors(&Tensor(h.into_dyn()), &Tensor(dh.into_dyn()), loss, 48, &mut ChaCha8Rng::seed_from_u64(seed));
    worst(&errs).1
}

/// Gradient of the combined simple, velocity and foot-contact loss with
/// respect to the prediction.
pub fn loss_gradient(seed: u64) -> f64 {
    let layout = FeatureLayout::desk();
    let sched = NoiseSchedule::cosine(1000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Array3<f64> = gaussian((2, 5, 59), &mut rng);
    for c in layout.slice(SliceKind::FootContacts) {
        for b in 0..2 {
            for i in 0..5 {
                x[[b, i, c]] = ((b * 3 + i + c + seed as usize) % 2) as f64;
            }
        }
    }
    let x0: Array3<f64> = gaussian((2, 5, 59), &mut rng);
    let mut mask = Array2::from_elem((2, 5), true);
    mask[[1, 4]] = false;
    let weights = LossWeights::default();
    let t = [rng.random_range(1..1000), rng.random_range(1..1000)];
    let mut g = Array3::zeros(x0.raw_dim());
    total_loss(x.view(), x0.view(), &t, mask.view(), &weights, &layout, &sched, Some(&mut g)).unwrap();
    let loss = |p: &Tensor| {
        let y = p.0.clone().into_dimensionality::<ndarray::Ix3>().unwrap();
        total_loss(x.view(), y.view(), &t, mask.view(), &weights, &layout, &sched, None).unwrap().total
    };
    worst(&grad_errors(&Tensor(x0.into_dyn()), &Tensor(g.into_dyn()), loss, 200, &mut rng)).1
}

/// Gradients of the trainable ControlNet branch through the frozen backbone.
pub fn controlnet_gradient(seed: u64) -> (String, f64) {
    let cfg = ModelConfig { max_len: 8, ..ModelConfig::preset(Preset::Tiny, 59) };
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let mut base: DenoiserParams<f64> = DenoiserParams::init(cfg, &mut rng).unwrap();
    perturb(&mut base, 0.05, &mut rng);
    let mut net = ControlNetParams::build(Arc::new(base), tiny_moc(), &mut rng).unwrap();
    perturb(&mut net.branch, 0.1, &mut rng);
    let tokens = TokenInput { emb: gaussian((3, 6), &mut rng), valid: vec![true, true, false], eos: 1 };
    let x: Array2<f64> = gaussian((5, 59), &mut rng);
    let w: Array2<f64> = gaussian((5, 59), &mut rng);
    let mask = [true, true, true, true, false];
    let (_, cache) = net.forward_item(x.view(), 250, &mask, &tokens).unwrap();
    let mut g = net.branch.zeroed();
    net.backward_item(&cache, &tokens, w.view(), &mut g);
    let loss = |b: &ControlBranch<f64>| {
        let n = ControlNetParams { branch: b.clone(), ..net.clone() };
        (&n.forward_item(x.view(), 250, &mask, &tokens).unwrap().0 * &w).sum()
    };
    worst(&grad_errors(&net.branch, &g, loss, 6, &mut rng))
}
