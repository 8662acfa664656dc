//! Acceptance report: one PASS/FAIL line per criterion at its tolerance.
//!
//! Runs as a plain binary so the lines always reach the terminal. A failed
//! criterion is reported, not panicked on; the process only fails when a
//! check cannot run at all. Pass substrings as arguments to run a subset.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use common::checks::*;
use common::perturb;
use motif_core::backbone::{DenoiserParams, ModelConfig, Preset};
use motif_core::controlnet::{Conditioned, ControlNetParams};
use motif_core::data::synth::{generate_synthetic_dataset, generate_text_motion_pairs, SynthConfig, TextMotionPair};
use motif_core::data::{FeatureLayout, FeatureNormalizer, MotionDataset};
use motif_core::metrics::{frechet_distance, r_precision, FeatureExtractor, FeatureStats, StatsExtractor};
use motif_core::moc::{Ablation, MoCConfig, TokenInput};
use motif_core::optim::{AdamW, OptimConfig};
use motif_core::run::{self, RunConfig};
use motif_core::schedule::{gaussian, sample, Denoiser, NoiseSchedule, SamplerConfig};
use motif_core::text::{EmbeddingProvider, StubEmbedder};
use motif_core::train::*;
use motif_core::Result;
use ndarray::{s, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String)>;

struct Report {
    filters: Vec<String>,
    rows: Vec<(String, bool)>,
}

impl Report {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        if !self.filters.is_empty() && !self.filters.iter().any(|p| name.contains(p.as_str())) {
            return;
        }
        let t = Instant::now();
        let (ok, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("{} {name}: {detail} [{:.1}s]", if ok { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
        self.rows.push((name.into(), ok));
    }
}

const WORDS: [&str; 8] = ["walk", "jump", "kick", "spin", "wave", "crouch", "run", "punch"];

fn random_prompt(rng: &mut impl Rng) -> String {
    let a = WORDS[rng.random_range(0..WORDS.len())];
    let b = WORDS[rng.random_range(0..WORDS.len())];
    format!("a person {a} then {b}")
}

fn perturbed_tiny(seed: u64) -> DenoiserParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = DenoiserParams::init(ModelConfig::preset(Preset::Tiny, 59), &mut rng).unwrap();
    perturb(&mut base, 0.1, &mut rng);
    base
}

fn max_dev(a: &ndarray::Array3<f64>, b: &ndarray::Array3<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn identity() -> Outcome {
    let stub = StubEmbedder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = ControlNetParams::build(Arc::new(perturbed_tiny(10)), MoCConfig::default(), &mut rng)?;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.random_range(1..=64);
        let t = rng.random_range(0..1000);
        let x = gaussian((1, len, 59), &mut rng);
        let mask = Array2::from_elem((1, len), true);
        let tokens = TokenInput::from_conditioning(&stub.embed(&random_prompt(&mut rng))?);
        let dc = Conditioned { net: &net, tokens: &tokens }.denoise(x.view(), &[t], mask.view())?;
        let du = net.frozen.denoise(x.view(), &[t], mask.view())?;
        worst = worst.max(max_dev(&dc, &du));
    }
    Ok((worst <= 1e-5, format!("max |D_c - D_u| = {worst:.2e} over 100 triples (tol 1e-5)")))
}

fn guidance_collapse() -> Outcome {
    let stub = StubEmbedder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let moc = MoCConfig { d_m: 32, pool_size: 4, ..Default::default() };
    let mut net = ControlNetParams::build(Arc::new(perturbed_tiny(13)), moc, &mut rng)?;
    // a trained branch, so conditional and unconditional predictions differ
    perturb(&mut net.branch, 0.05, &mut rng);
    let tokens = TokenInput::from_conditioning(&stub.embed("a person spin then kick")?);
    let cond = Conditioned { net: &net, tokens: &tokens };
    let sched = NoiseSchedule::cosine(1000);
    let run = |u: &dyn Denoiser<f64>, c: Option<&dyn Denoiser<f64>>, s: f64| {
        let cfg = SamplerConfig { n_steps: 50, guidance: s, eta: 0.0 };
        sample(u, c, &cfg, &sched, 24, 59, &mut ChaCha8Rng::seed_from_u64(7)).map(|x| x.insert_axis(ndarray::Axis(0)))
    };
    let base = &*net.frozen;
    let at_one = max_dev(&run(base, Some(&cond), 1.0)?, &run(&cond, None, 1.0)?);
    let at_zero = max_dev(&run(base, Some(&cond), 0.0)?, &run(base, None, 1.0)?);
    let spread = max_dev(&run(base, Some(&cond), 4.5)?, &run(base, None, 1.0)?);
    let ok = at_one <= 1e-6 && at_zero <= 1e-6 && spread > 1e-3;
    Ok((ok, format!("s=1 vs conditional {at_one:.2e}, s=0 vs unconditional {at_zero:.2e} (tol 1e-6); s=4.5 moves by {spread:.2e}")))
}

fn gradient_suite() -> Outcome {
    let mut errs: Vec<(String, f64)> = Vec::new();
    for seed in 0..10 {
        errs.push(backbone_gradient(seed));
        errs.push(("losses".into(), loss_gradient(seed)));
    }
    for ablation in [Ablation::None, Ablation::NoZeroConv, Ablation::NoAttnMask, Ablation::CrossAttnFfn] {
        for seed in 0..6 {
            let (n, e) = moc_gradient(ablation, seed);
            errs.push((format!("moc[{ablation}].{n}"), e));
        }
    }
    for seed in 0..3 {
        errs.push(("moc input".into(), moc_input_gradient(seed)));
        errs.push(controlnet_gradient(seed));
    }
    let (name, e) = common::worst(&errs);
    Ok((e < 1e-3, format!("{} instances, worst relative error {e:.2e} at {name} (tol 1e-3)", errs.len())))
}

fn moc_oracle() -> Outcome {
    let dev = moc_oracle_deviation(100, 2024);
    Ok((dev < 1e-4, format!("max deviation {dev:.2e} over 100 instances (tol 1e-4)")))
}

fn blend() -> Outcome {
    let r = blend_report();
    let ok = r.sum_dev < 1e-6 && r.single_exact && r.saturated_dev < 1e-4;
    Ok((
        ok,
        format!(
            "|sum w - 1| {:.1e}, K=1 exact: {}, saturated gate off by {:.1e}",
            r.sum_dev, r.single_exact, r.saturated_dev
        ),
    ))
}

fn mask() -> Outcome {
    let (half, sig) = mask_values();
    Ok((half == 0.5 && sig < 1e-9, format!("mask at beta*max = {half}, |mask(max) - sigmoid(18)| = {sig:.1e}")))
}

fn windows() -> Outcome {
    let p_uniform = window_length_p(100_000, 20);
    let p_law = dataset_window_p(100_000);
    let bad = fuzz_window_violations(1_000_000);
    Ok((
        p_uniform > 0.01 && p_law > 0.01 && bad == 0,
        format!("chi-square p {p_uniform:.3} (uniform), {p_law:.3} (mixed clips); {bad} bad reads in 1e6"),
    ))
}

fn schedule_sampler_rope() -> Outcome {
    let sched_ok = [1, 10, 1000, 4000].iter().all(|&t| schedule_well_formed(t));
    let ddim = [1, 10, 200].iter().map(|&n| ddim_oracle_error(n)).fold(0.0, f64::max);
    let rope = rope_shift_deviation();
    Ok((
        sched_ok && ddim < 1e-4 && rope < 1e-5,
        format!("schedule well formed: {sched_ok}; DDIM oracle error {ddim:.1e}; RoPE shift {rope:.1e}"),
    ))
}

fn tiny(max_len: usize) -> ModelConfig {
    ModelConfig { max_len, ..ModelConfig::preset(Preset::Tiny, 59) }
}

fn optim(lr: f64, steps: usize, batch: usize, base: OptimConfig) -> OptimConfig {
    OptimConfig { lr, warmup_steps: 50, total_steps: steps, batch_size: batch, ..base }
}

/// Initial loss and final/initial ratio after 2000 pre-training steps.
fn overfit_ratio(data: &MotionDataset) -> Result<(f64, f64)> {
    let layout = FeatureLayout::desk();
    let mut model = DenoiserParams::init(tiny(64), &mut ChaCha8Rng::seed_from_u64(0))?;
    let sched = NoiseSchedule::cosine(1000);
    let pc = PretrainConfig { l_max: 64, optim: optim(1e-3, 2000, 8, OptimConfig::pretrain()), weights: Default::default() };
    let mut erng = ChaCha8Rng::seed_from_u64(77);
    let evals = (0..8).map(|_| draw_pretrain_batch(data, 64, 8, 1000, &mut erng)).collect::<Result<Vec<_>>>()?;
    let ev = |m: &DenoiserParams<f32>| -> Result<f64> {
        let mut s = 0.0;
        for b in &evals {
            s += denoiser_loss(m, b, &sched, &pc.weights, &layout, false)?.0.total;
        }
        Ok(s / evals.len() as f64)
    };
    let l0 = ev(&model)?;
    let mut opt = AdamW::new(&model);
    pretrain(&mut model, &mut opt, data, &sched, &pc, 2000, &mut ChaCha8Rng::seed_from_u64(1))?;
    Ok((l0, ev(&model)? / l0))
}

// The verdict uses the features as stored. The standardized run, which the
// commands train on, is printed alongside: its floor is the unpredictable
// part of a random window at large t, a larger share of a unit-variance loss.
fn overfit_pretrain() -> Outcome {
    let layout = FeatureLayout::desk();
    let raw = generate_synthetic_dataset(5, 1, &layout, &SynthConfig { min_frames: 40, max_frames: 60 })?;
    let (l0, ratio) = overfit_ratio(&raw)?;
    let (n0, normalized) = overfit_ratio(&FeatureNormalizer::fit(&raw)?.normalize_dataset(&raw)?)?;
    Ok((
        ratio < 0.1,
        format!(
            "5 clips, 2000 steps: loss {l0:.3} -> ratio {ratio:.4} (need < 0.10); \
             standardized features {n0:.3} -> ratio {normalized:.4}"
        ),
    ))
}

/// Backbone pre-trained on the caption-paired motions, shared by the
/// fine-tuning criteria.
struct Pretrained {
    base: Arc<DenoiserParams<f32>>,
    norm: FeatureNormalizer,
    train: Vec<TextMotionPair>,
    heldout: Vec<TextMotionPair>,
}

const PAIR_FRAMES: usize = 32;

fn pretrained() -> Result<Pretrained> {
    let layout = FeatureLayout::desk();
    let (train, heldout) = generate_text_motion_pairs(50, 10, PAIR_FRAMES, &layout, 0.2, 9);
    let raw = MotionDataset::new(
        layout,
        train.iter().enumerate().map(|(i, p)| (format!("pair_{i:04}"), p.motion.clone())).collect(),
    )?;
    let norm = FeatureNormalizer::fit(&raw)?;
    let data = norm.normalize_dataset(&raw)?;
    let mut model = DenoiserParams::init(tiny(64), &mut ChaCha8Rng::seed_from_u64(0))?;
    let steps = 10_000;
    let pc = PretrainConfig { l_max: 64, optim: optim(1e-3, steps, 8, OptimConfig::pretrain()), weights: Default::default() };
    let mut opt = AdamW::new(&model);
    pretrain(&mut model, &mut opt, &data, &NoiseSchedule::cosine(1000), &pc, steps, &mut ChaCha8Rng::seed_from_u64(1))?;
    Ok(Pretrained { base: Arc::new(model), norm, train, heldout })
}

fn paired(pairs: &[TextMotionPair], norm: &FeatureNormalizer, stub: &StubEmbedder) -> Result<PairedData> {
    let examples = pairs
        .iter()
        .map(|p| {
            Ok(PairedExample {
                prompt: p.prompt.clone(),
                motion: norm.normalize(p.motion.frames.view())?,
                cond: stub.embed(&p.prompt)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PairedData { layout: FeatureLayout::desk(), examples, empty: stub.empty_token()? })
}

fn finetune_config(steps: usize) -> FinetuneConfig {
    FinetuneConfig {
        l_max: 64,
        optim: optim(3e-3, steps, 4, OptimConfig::finetune()),
        weights: Default::default(),
        eos_dropout: 0.5,
    }
}

fn moc_config(ablation: Ablation) -> MoCConfig {
    MoCConfig { d_m: 64, ..Default::default() }.with_ablation(ablation)
}

/// Denormalized DDIM sample for `prompt`, or unconditional when `None`.
fn draw(
    pre: &Pretrained,
    net: &ControlNetParams<f32>,
    prompt: Option<&str>,
    guidance: f64,
    seed: u64,
) -> Result<Array2<f32>> {
    let sched = NoiseSchedule::cosine(1000);
    let cfg = SamplerConfig { n_steps: 50, guidance, eta: 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = match prompt {
        Some(p) => {
            let tokens = TokenInput::from_conditioning(&StubEmbedder::default().embed(p)?);
            let cond = Conditioned { net, tokens: &tokens };
            sample(&*pre.base, Some(&cond), &cfg, &sched, PAIR_FRAMES, 59, &mut rng)?
        }
        None => sample(&*pre.base, None, &cfg, &sched, PAIR_FRAMES, 59, &mut rng)?,
    };
    pre.norm.denormalize(z.view())
}

fn mse(a: ArrayView2<f32>, b: ArrayView2<f32>) -> f64 {
    (&a - &b).mapv(|v| (v as f64).powi(2)).mean().unwrap()
}

fn overfit_controlnet(pre: &Pretrained) -> Outcome {
    let layout = FeatureLayout::desk();
    let stub = StubEmbedder::default();
    let target = &pre.train[0];
    let pd = paired(std::slice::from_ref(target), &pre.norm, &stub)?;
    let sched = NoiseSchedule::cosine(1000);
    let fc = finetune_config(2000);
    let mut net = ControlNetParams::build(pre.base.clone(), moc_config(Ablation::None), &mut ChaCha8Rng::seed_from_u64(2))?;
    let mut erng = ChaCha8Rng::seed_from_u64(77);
    let evals = (0..8).map(|_| draw_finetune_batch(&pd, 64, 4, 1000, 0.0, &mut erng)).collect::<Result<Vec<_>>>()?;
    let ev = |n: &ControlNetParams<f32>| -> Result<f64> {
        let mut s = 0.0;
        for (b, tk) in &evals {
            s += controlnet_loss(n, b, tk, &sched, &fc.weights, &layout, false)?.0.total;
        }
        Ok(s / evals.len() as f64)
    };
    let l0 = ev(&net)?;
    let mut opt = AdamW::new(&net.branch);
    finetune(&mut net, &mut opt, &pd, &sched, &fc, 2000, &mut ChaCha8Rng::seed_from_u64(1))?;
    let ratio = ev(&net)? / l0;
    let clip = target.motion.frames.view();
    let (mut cond, mut guided, mut uncond) = (0.0, 0.0, 0.0);
    for seed in 0..4 {
        cond += mse(draw(pre, &net, Some(&target.prompt), 1.0, seed)?.view(), clip);
        guided += mse(draw(pre, &net, Some(&target.prompt), 4.5, seed)?.view(), clip);
        uncond += mse(draw(pre, &net, None, 1.0, seed)?.view(), clip);
    }
    let sample_ratio = cond / uncond;
    Ok((
        ratio < 0.05 && sample_ratio < 0.25,
        format!(
            "1 pair, 2000 steps: loss ratio {ratio:.4} (need < 0.05); sample MSE ratio {sample_ratio:.4} at s=1 \
             (need < 0.25), {:.4} at s=4.5",
            guided / uncond
        ),
    ))
}

fn per_seed(table: &BTreeMap<String, Vec<f64>>) -> String {
    table
        .iter()
        .map(|(k, v)| format!("{k} [{}]", v.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>().join(", ")))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Held-out prompt reconstruction: the x0 error of the guided branch on the
/// held-out pairs at fixed (window, t, noise) draws shared by every variant.
/// The error of one DDIM sample per prompt is also reported; at this scale
/// its seed noise swamps the gaps between variants.
fn ablation_order(pre: &Pretrained) -> Outcome {
    let layout = FeatureLayout::desk();
    let stub = StubEmbedder::default();
    let pd = paired(&pre.train, &pre.norm, &stub)?;
    let held = paired(&pre.heldout, &pre.norm, &stub)?;
    let sched = NoiseSchedule::cosine(1000);
    let steps = 1000;
    let fc = finetune_config(steps);
    let mut erng = ChaCha8Rng::seed_from_u64(55);
    let evals = (0..32).map(|_| draw_finetune_batch(&held, 64, 4, 1000, 0.0, &mut erng)).collect::<Result<Vec<_>>>()?;
    let variants = [Ablation::None, Ablation::NoZeroConv, Ablation::NoAttnMask, Ablation::CrossAttnFfn];
    let (mut recon, mut sampled): (BTreeMap<String, Vec<f64>>, BTreeMap<String, Vec<f64>>) = Default::default();
    let mut wins = [0usize; 3];
    for seed in 0..3u64 {
        let mut errs = Vec::new();
        for ablation in variants {
            let mut net = ControlNetParams::build(pre.base.clone(), moc_config(ablation), &mut ChaCha8Rng::seed_from_u64(seed))?;
            let mut opt = AdamW::new(&net.branch);
            finetune(&mut net, &mut opt, &pd, &sched, &fc, steps, &mut ChaCha8Rng::seed_from_u64(100 + seed))?;
            let mut e = 0.0;
            for (b, tk) in &evals {
                e += controlnet_loss(&net, b, tk, &sched, &fc.weights, &layout, false)?.0.simple;
            }
            e /= evals.len() as f64;
            let mut d = 0.0;
            for (i, p) in pre.heldout.iter().enumerate() {
                d += mse(draw(pre, &net, Some(&p.prompt), 1.0, i as u64)?.view(), p.motion.frames.view());
            }
            recon.entry(ablation.to_string()).or_default().push(e);
            sampled.entry(ablation.to_string()).or_default().push(d / pre.heldout.len() as f64);
            errs.push(e);
        }
        for (w, e) in wins.iter_mut().zip(&errs[1..]) {
            *w += usize::from(errs[0] <= *e);
        }
    }
    Ok((
        wins.iter().all(|&w| w >= 2),
        format!(
            "held-out reconstruction MSE per seed: {}; full wins vs (no-zero-conv, no-attn-mask, cross-attn-ffn) = \
             {wins:?} of 3 (need >= 2 each); sampled-clip MSE: {}",
            per_seed(&recon),
            per_seed(&sampled)
        ),
    ))
}

fn metrics() -> Outcome {
    let a = FeatureStats { mean: Array1::zeros(2), cov: Array2::eye(2), count: 100 };
    let b = FeatureStats { mean: Array1::ones(2), cov: Array2::eye(2) * 4.0, count: 100 };
    let diag = frechet_distance(&a, &b)?;

    let layout = FeatureLayout::desk();
    let ds = generate_synthetic_dataset(800, 13, &layout, &SynthConfig { min_frames: 30, max_frames: 60 })?;
    let ex = StatsExtractor { input_dim: layout.dim() };
    let clips: Vec<ArrayView2<f32>> = ds.clips.iter().map(|c| c.frames.view()).collect();
    let feats = ex.extract_all(&clips)?;
    let first = FeatureStats::from_features(feats.slice(s![..400, ..]))?;
    let second = FeatureStats::from_features(feats.slice(s![400.., ..]))?;
    let self_fid = frechet_distance(&first, &second)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noisy: Vec<Array2<f32>> =
        ds.clips.iter().map(|c| &c.frames + &(gaussian::<f32, _, _>(c.frames.dim(), &mut rng) * 0.1)).collect();
    let noisy_views: Vec<ArrayView2<f32>> = noisy.iter().map(|c| c.view()).collect();
    let other = FeatureStats::from_features(ex.extract_all(&noisy_views)?.slice(s![400.., ..]))?;
    let cross_fid = frechet_distance(&first, &other)?;

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let m: Array2<f64> = gaussian((3000, 16), &mut rng);
    let t: Array2<f64> = gaussian((3000, 16), &mut rng);
    let null = r_precision(m.view(), t.view(), 32, 3, &mut rng)?;

    let mut counts = Vec::new();
    let mut counts_ok = true;
    for (p, target) in [(Preset::Base, 88e6), (Preset::Large, 201e6), (Preset::Huge, 405e6), (Preset::Giant, 1e9)] {
        let n = ModelConfig::preset(p, 263).param_count() as f64;
        counts_ok &= (n / target - 1.0).abs() < 0.05;
        counts.push(format!("{:.1}M", n / 1e6));
    }
    let ok = diag == 4.0 && self_fid < 0.1 * cross_fid && (null - 0.094).abs() <= 0.02 && counts_ok;
    Ok((
        ok,
        format!(
            "diagonal FD {diag}; self-FID {self_fid:.3} vs {cross_fid:.3} for noised clips; R-precision null {null:.4}; \
             preset sizes {}",
            counts.join("/")
        ),
    ))
}

/// Every file under `dir`, keyed by relative path.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline_config() -> Result<RunConfig> {
    RunConfig::from_json(
        r#"{
        "seed": 3,
        "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_head": 8, "d_ff": 32, "max_len": 64,
                  "input_dim": 59, "mod_rank": 4, "freq_dim": 8},
        "pretrain": {"l_max": 32, "optim": {"total_steps": 6, "batch_size": 2, "warmup_steps": 2}},
        "finetune": {"l_max": 32, "optim": {"total_steps": 4, "batch_size": 2, "warmup_steps": 2}},
        "moc": {"d_m": 8, "pool_size": 3, "d_c": 16},
        "sample": {"sampler": {"n_steps": 5}, "length": 24, "count": 3},
        "eval": {"replicates": 3, "r_precision_pool": 3},
        "encoder": {"steps": 5, "batch_size": 4, "hidden": 8},
        "synth": {"n_clips": 4, "min_frames": 20, "max_frames": 30, "n_pairs": 6, "n_heldout": 3, "pair_frames": 24},
        "checkpoint_every": 3,
        "stub_embedder": true
    }"#,
    )
}

/// synth, pretrain, finetune, sample, train-encoder, eval with relative
/// paths under the current directory.
fn pipeline(base: &RunConfig) -> Result<()> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    run::cmd_synth(&with(&|c| c.paths.out_dir = Some("syn".into())))?;
    run::cmd_pretrain(&with(&|c| {
        c.paths.data_dir = Some("syn/motions".into());
        c.paths.out_dir = Some("pre".into());
    }))?;
    run::cmd_finetune(&with(&|c| {
        c.paths.pairs_dir = Some("syn/pairs".into());
        c.paths.checkpoint = Some("pre/pretrain.omgc".into());
        c.paths.out_dir = Some("ft".into());
    }))?;
    run::cmd_sample(&with(&|c| {
        c.sample.prompt = Some("a person walk then kick".into());
        c.paths.controlnet = Some("ft/controlnet.omgc".into());
        c.paths.out_dir = Some("gen".into());
    }))?;
    run::cmd_train_encoder(&with(&|c| {
        c.paths.pairs_dir = Some("syn/pairs".into());
        c.paths.out_dir = Some("enc".into());
    }))?;
    run::cmd_eval(&with(&|c| {
        c.paths.generated_dir = Some("gen".into());
        c.paths.reference_dir = Some("syn/heldout".into());
        c.paths.encoder = Some("enc/encoder.json".into());
        c.paths.out_dir = Some("eval".into());
    }))?;
    Ok(())
}

fn reproducibility() -> Outcome {
    let cfg = pipeline_config()?;
    let root = tempfile::tempdir().map_err(|e| motif_core::Error::io(Path::new("tmp"), e))?;
    let home = std::env::current_dir().map_err(|e| motif_core::Error::io(Path::new("."), e))?;
    let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("thread pool");
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let dir = root.path().join(name);
        std::fs::create_dir_all(&dir).map_err(|e| motif_core::Error::io(&dir, e))?;
        std::env::set_current_dir(&dir).map_err(|e| motif_core::Error::io(&dir, e))?;
        let r = serial.install(|| pipeline(&cfg));
        std::env::set_current_dir(&home).map_err(|e| motif_core::Error::io(&home, e))?;
        r?;
        trees.push(tree(&dir));
    }
    let differing: Vec<&String> = trees[0].iter().filter(|(k, v)| trees[1].get(*k) != Some(*v)).map(|(k, _)| k).collect();
    let same_set = trees[0].len() == trees[1].len();
    Ok((
        differing.is_empty() && same_set,
        format!("{} files from six commands, {} differ between two serial runs {differing:?}", trees[0].len(), differing.len()),
    ))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut r = Report { filters, rows: Vec::new() };
    r.check("zero-init identity", identity);
    r.check("guidance collapse", guidance_collapse);
    r.check("gradient suite", gradient_suite);
    r.check("moc oracle", moc_oracle);
    r.check("expert blend", blend);
    r.check("attention mask", mask);
    r.check("sliding window", windows);
    r.check("schedule, sampler, rope", schedule_sampler_rope);
    r.check("metrics", metrics);
    r.check("cli reproducibility", reproducibility);
    r.check("overfit (a) pretrain", overfit_pretrain);
    let wants_pretrained = r.filters.is_empty() || r.filters.iter().any(|f| "overfit (b) controlnet ablation order".contains(f.as_str()));
    if wants_pretrained {
        let t = Instant::now();
        match pretrained() {
            Ok(pre) => {
                println!("  (shared backbone pre-trained in {:.1}s)", t.elapsed().as_secs_f64());
                r.check("overfit (b) controlnet", || overfit_controlnet(&pre));
                r.check("ablation order", || ablation_order(&pre));
            }
            Err(e) => {
                let msg = format!("pre-training failed: {e}");
                r.check("overfit (b) controlnet", || Ok((false, msg.clone())));
                r.check("ablation order", || Ok((false, msg)));
            }
        }
    }
    let passed = r.rows.iter().filter(|(_, ok)| *ok).count();
    println!("{passed}/{} criteria passed", r.rows.len());
}
