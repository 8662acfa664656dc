//! Command layer behind the `motif` binary.
//!
//! Every command takes a [`RunConfig`], checks the paths it reads before any
//! work starts, and writes its artifacts plus the effective config into
//! `paths.out_dir`. [`exit_code`] maps errors onto process exit codes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{DenoiserParams, ModelConfig, Preset};
use crate::checkpoint::{sha256_hex, Checkpoint, CheckpointKind, CheckpointMeta, RngState};
use crate::controlnet::{Conditioned, ControlNetParams};
use crate::data::synth::{generate_synthetic_dataset, generate_text_motion_pairs, SynthConfig};
use crate::data::{FeatureLayout, FeatureNormalizer, MotionDataset, MotionSequence, SliceKind, STANDARD_FPS};
use crate::error::{Error, Result};
use crate::metrics::encoder::{normalize_rows, train_contrastive_encoder, ContrastiveEncoder, EncoderConfig};
use crate::metrics::{
    clip_score, diversity, frechet_distance, mean_ci95, r_precision, FeatureExtractor, FeatureStats, MetricRecord,
    StatsExtractor,
};
use crate::moc::{Ablation, MoCConfig, TokenInput};
use crate::nn::ParamTree;
use crate::optim::AdamW;
use crate::schedule::{sample, Denoiser, NoiseSchedule, Parameterization, SamplerConfig};
use crate::text::{EmbeddingProvider, EmbeddingTable, FallbackProvider, StubEmbedder};
use crate::train::{finetune_step, pretrain_step, FinetuneConfig, PairedData, PairedExample, PretrainConfig};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_CHECKPOINT: i32 = 5;
pub const EXIT_UNKNOWN_PROMPT: i32 = 6;

pub const CONFIG_FILE: &str = "config.json";
pub const PROMPTS_FILE: &str = "prompts.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PRETRAIN_FILE: &str = "pretrain.omgc";
pub const CONTROLNET_FILE: &str = "controlnet.omgc";
pub const ENCODER_FILE: &str = "encoder.json";

pub fn exit_code(e: &Error) -> i32 {
    use Error::*;
    match e {
        InvalidConfig(_) | OddHeadDim(_) | LengthExceeded { .. } | TokenOverflow(_) | EmptyPrompt => EXIT_CONFIG,
        Io { .. }
        | BadMagic { .. }
        | UnsupportedVersion(_)
        | Malformed(_)
        | DimensionMismatch { .. }
        | NonFiniteValue { .. }
        | UnknownLayout(_)
        | InvalidLayout(_)
        | LayoutMissingFeet
        | LayoutMismatch
        | EmptyDataset
        | TooFewSamples { .. }
        | Json(_) => EXIT_DATA,
        Diverged { .. } | NonFiniteActivation(_) => EXIT_DIVERGED,
        CheckpointMismatch(_) | DimMismatch(_) => EXIT_CHECKPOINT,
        UnknownPrompt(_) => EXIT_UNKNOWN_PROMPT,
        ShapeMismatch(_) | ScheduleOutOfRange { .. } | ZeroVector => EXIT_FAILURE,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSettings {
    pub t_max: usize,
    pub parameterization: Parameterization,
}

impl ScheduleSettings {
    pub fn build(&self) -> NoiseSchedule {
        NoiseSchedule::cosine(self.t_max).with_parameterization(self.parameterization)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSettings {
    pub sampler: SamplerConfig,
    pub length: usize,
    pub count: usize,
    pub prompt: Option<String>,
    pub unconditional: bool,
    /// Also write per-frame joint positions as CSV.
    pub dump_csv: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub replicates: usize,
    pub r_precision_pool: usize,
    pub top_k: usize,
    pub diversity_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSettings {
    pub n_clips: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub n_pairs: usize,
    pub n_heldout: usize,
    pub pair_frames: usize,
    pub base_scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub pairs_dir: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Pre-trained denoiser checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub controlnet: Option<PathBuf>,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub generated_dir: Option<PathBuf>,
    pub reference_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Everything a command needs. Missing keys take the desk-scale defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub layout: String,
    pub preset: Preset,
    /// Explicit dimensions; overrides `preset` when present.
    pub model: Option<ModelConfig>,
    pub schedule: ScheduleSettings,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub moc: MoCConfig,
    pub ablation: Ablation,
    pub sample: SampleSettings,
    pub eval: EvalSettings,
    pub encoder: EncoderConfig,
    pub synth: SynthSettings,
    /// Write an intermediate checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub stub_embedder: bool,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            layout: "desk".into(),
            preset: Preset::Tiny,
            model: None,
            schedule: ScheduleSettings { t_max: 1000, parameterization: Parameterization::VariancePreserving },
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            moc: MoCConfig { d_m: 64, ..MoCConfig::default() },
            ablation: Ablation::None,
            sample: SampleSettings {
                sampler: SamplerConfig::default(),
                length: 120,
                count: 1,
                prompt: None,
                unconditional: false,
                dump_csv: false,
            },
            eval: EvalSettings { replicates: 20, r_precision_pool: 32, top_k: 3, diversity_pairs: 300 },
            encoder: EncoderConfig::default(),
            synth: SynthSettings {
                n_clips: 64,
                min_frames: 60,
                max_frames: 200,
                n_pairs: 50,
                n_heldout: 10,
                pair_frames: 120,
                base_scale: 0.2,
            },
            checkpoint_every: 500,
            stub_embedder: false,
            paths: Paths::default(),
        }
    }
}

/// Overlays `patch` on `base`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

impl RunConfig {
    /// Parses a possibly partial JSON config over the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut full = serde_json::to_value(Self::default())?;
        merge(&mut full, patch);
        serde_json::from_value(full).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn layout(&self) -> Result<FeatureLayout> {
        FeatureLayout::by_name(&self.layout)
    }

    pub fn model_config(&self, input_dim: usize) -> Result<ModelConfig> {
        let m = match self.model {
            Some(m) if m.input_dim != input_dim => {
                return Err(Error::InvalidConfig(format!(
                    "model input_dim {} but the data has {input_dim} channels",
                    m.input_dim
                )))
            }
            Some(m) => m,
            None => ModelConfig::preset(self.preset, input_dim),
        };
        m.validate()?;
        if self.pretrain.l_max > m.max_len || self.finetune.l_max > m.max_len {
            return Err(Error::InvalidConfig(format!("window length exceeds the model maximum {}", m.max_len)));
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.moc.with_ablation(self.ablation).validate()?;
        self.encoder.validate()?;
        if self.schedule.t_max == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        let s = &self.sample;
        if s.length == 0 || s.count == 0 || s.sampler.n_steps == 0 || s.sampler.guidance < 0.0 || s.sampler.eta < 0.0 {
            return Err(Error::InvalidConfig("sampling needs length, count, steps >= 1 and s, eta >= 0".into()));
        }
        let e = &self.eval;
        if e.replicates == 0 || e.r_precision_pool < 2 || e.top_k == 0 || e.diversity_pairs == 0 {
            return Err(Error::InvalidConfig("eval needs replicates, top_k, pairs >= 1 and a pool of >= 2".into()));
        }
        let y = &self.synth;
        if y.n_clips == 0 || y.min_frames == 0 || y.min_frames > y.max_frames || y.pair_frames == 0 {
            return Err(Error::InvalidConfig("synthetic data needs clips >= 1 and 1 <= min_frames <= max_frames".into()));
        }
        Ok(())
    }

    /// Text provider from `paths.embeddings` and/or the stub flag. The stub
    /// emits vectors of the MoC text width.
    pub fn provider(&self) -> Result<Box<dyn EmbeddingProvider>> {
        let stub = StubEmbedder::with_dim(self.moc.d_c);
        match (&self.paths.embeddings, self.stub_embedder) {
            (Some(p), fallback) => {
                let table = EmbeddingTable::load(require_file(Some(p), "embeddings")?)?;
                Ok(if fallback { Box::new(FallbackProvider { table, stub }) } else { Box::new(table) })
            }
            (None, true) => Ok(Box::new(stub)),
            (None, false) => Err(Error::InvalidConfig("text conditioning needs --embeddings or --stub-embedder".into())),
        }
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    /// The config recorded inside checkpoints: the recipe without the
    /// machine-specific paths.
    fn recipe(&self) -> Result<Value> {
        let mut r = self.clone();
        r.paths = Paths::default();
        Ok(serde_json::to_value(r)?)
    }
}

/// Artifacts a command wrote, keyed by file name, with their SHA-256.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub files: BTreeMap<String, String>,
    pub summary: String,
}

impl Outcome {
    fn new(out_dir: PathBuf) -> Self {
        Self { out_dir, ..Default::default() }
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.out_dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write_config(&mut self, cfg: &RunConfig) -> Result<()> {
        self.write(CONFIG_FILE, cfg.to_json()?.as_bytes())
    }
}

fn require_dir<'a>(p: Option<&'a PathBuf>, role: &str) -> Result<&'a Path> {
    let p = p.ok_or_else(|| Error::InvalidConfig(format!("{role} is required")))?;
    if !p.is_dir() {
        return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, format!("{role} is not a directory"))));
    }
    Ok(p)
}

fn require_file<'a>(p: Option<&'a PathBuf>, role: &str) -> Result<&'a Path> {
    let p = p.ok_or_else(|| Error::InvalidConfig(format!("{role} is required")))?;
    if !p.is_file() {
        return Err(Error::InvalidConfig(format!("{role} {} does not exist", p.display())));
    }
    Ok(p)
}

/// Loads a checkpoint, reporting unreadable contents as a mismatch.
fn load_checkpoint(path: &Path, kind: CheckpointKind) -> Result<(Checkpoint, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::CheckpointMismatch(_) => e,
        other => Error::CheckpointMismatch(format!("{}: {other}", path.display())),
    })?;
    if ck.meta.kind != kind {
        return Err(Error::CheckpointMismatch(format!(
            "{} holds a {:?} checkpoint, expected {kind:?}",
            path.display(),
            ck.meta.kind
        )));
    }
    Ok((ck, sha256_hex(&bytes)))
}

fn restore_rng(ck: &Checkpoint) -> Result<ChaCha8Rng> {
    ck.meta.rng.as_ref().ok_or_else(|| Error::CheckpointMismatch("checkpoint has no rng state".into()))?.restore()
}

fn json_lines<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// A motion directory with optional captions from its `prompts.json`.
pub struct LabeledDir {
    pub data: MotionDataset,
    pub prompts: Vec<Option<String>>,
}

impl LabeledDir {
    pub fn load(dir: &Path) -> Result<Self> {
        let data = MotionDataset::load_dir(dir)?;
        let p = dir.join(PROMPTS_FILE);
        let table: BTreeMap<String, String> = if p.is_file() {
            serde_json::from_slice(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?
        } else {
            BTreeMap::new()
        };
        let prompts = data.index.clips.iter().map(|c| table.get(&c.clip_id).cloned()).collect();
        Ok(Self { data, prompts })
    }

    pub fn require_prompts(&self) -> Result<Vec<&str>> {
        self.prompts
            .iter()
            .zip(&self.data.index.clips)
            .map(|(p, c)| p.as_deref().ok_or_else(|| Error::Malformed(format!("clip {} has no prompt", c.clip_id))))
            .collect()
    }

    pub fn views(&self) -> Vec<ArrayView2<'_, f32>> {
        self.data.clips.iter().map(|c| c.frames.view()).collect()
    }
}

fn write_labeled(dir: &Path, named: Vec<(String, MotionSequence, Option<String>)>, layout: &FeatureLayout) -> Result<()> {
    let prompts: BTreeMap<String, String> =
        named.iter().filter_map(|(id, _, p)| p.clone().map(|p| (id.clone(), p))).collect();
    let ds = MotionDataset::new(layout.clone(), named.into_iter().map(|(id, s, _)| (id, s)).collect())?;
    ds.write_dir(dir)?;
    if !prompts.is_empty() {
        let p = dir.join(PROMPTS_FILE);
        fs::write(&p, serde_json::to_vec_pretty(&prompts)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Writes an unlabeled corpus under `motions/`, training pairs under `pairs/`
/// and held-out pairs under `heldout/`. The corpus also holds the training
/// pair motions so pre-training sees their distribution.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    let mut out = Outcome::new(cfg.out_dir()?);
    let y = &cfg.synth;
    let corpus =
        generate_synthetic_dataset(y.n_clips, cfg.seed, &layout, &SynthConfig { min_frames: y.min_frames, max_frames: y.max_frames })?;
    let (train, heldout) =
        generate_text_motion_pairs(y.n_pairs, y.n_heldout, y.pair_frames, &layout, y.base_scale, cfg.seed.wrapping_add(1));
    let mut motions: Vec<_> = corpus
        .index
        .clips
        .iter()
        .zip(&corpus.clips)
        .map(|(c, s)| (format!("clip_{}", c.clip_id), s.clone(), None))
        .collect();
    motions.extend(train.iter().enumerate().map(|(i, p)| (format!("pair_{i:04}"), p.motion.clone(), None)));
    write_labeled(&out.out_dir.join("motions"), motions, &layout)?;
    let pairs = train.into_iter().enumerate().map(|(i, p)| (format!("pair_{i:04}"), p.motion, Some(p.prompt))).collect();
    write_labeled(&out.out_dir.join("pairs"), pairs, &layout)?;
    if !heldout.is_empty() {
        let held = heldout.into_iter().enumerate().map(|(i, p)| (format!("held_{i:04}"), p.motion, Some(p.prompt))).collect();
        write_labeled(&out.out_dir.join("heldout"), held, &layout)?;
    }
    out.write_config(cfg)?;
    out.summary = format!("wrote {} corpus clips and {} pairs", y.n_clips + y.n_pairs, y.n_pairs);
    Ok(out)
}

fn denoiser_checkpoint(
    cfg: &RunConfig,
    model: &DenoiserParams<f32>,
    opt: &AdamW<DenoiserParams<f32>>,
    sched: &NoiseSchedule,
    norm: &FeatureNormalizer,
    rng: &ChaCha8Rng,
) -> Result<Vec<u8>> {
    let mut meta = CheckpointMeta::new(CheckpointKind::Denoiser, model.config, sched);
    meta.step = opt.step;
    meta.rng = Some(RngState::capture(rng));
    meta.normalizer = Some(norm.clone());
    meta.run_config = Some(cfg.recipe()?);
    Checkpoint::from_denoiser(meta, model, Some(opt)).to_bytes()
}

/// Unconditional pre-training on sliding windows of `paths.data_dir`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let data_dir = require_dir(cfg.paths.data_dir.as_ref(), "data_dir")?;
    let resume = cfg.paths.resume.as_ref().map(|p| require_file(Some(p), "resume")).transpose()?;
    let raw = MotionDataset::load_dir(data_dir)?;
    let sched = cfg.schedule.build();
    let (mut model, mut opt, mut rng, norm) = match resume {
        Some(path) => {
            let (ck, _) = load_checkpoint(path, CheckpointKind::Denoiser)?;
            if ck.meta.schedule != (&sched).into() {
                return Err(Error::CheckpointMismatch("resume checkpoint uses a different schedule".into()));
            }
            let model = ck.denoiser()?;
            if model.config.input_dim != raw.layout.dim() {
                return Err(Error::CheckpointMismatch(format!(
                    "checkpoint takes {} channels, data has {}",
                    model.config.input_dim,
                    raw.layout.dim()
                )));
            }
            let opt = ck.denoiser_optimizer()?.ok_or_else(|| Error::CheckpointMismatch("no optimizer state".into()))?;
            let norm = ck.meta.normalizer.clone().unwrap_or_else(|| FeatureNormalizer::identity(raw.layout.dim()));
            (model, opt, restore_rng(&ck)?, norm)
        }
        None => {
            let mc = cfg.model_config(raw.layout.dim())?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let model = DenoiserParams::init(mc, &mut rng)?;
            let opt = AdamW::new(&model);
            (model, opt, rng, FeatureNormalizer::fit(&raw)?)
        }
    };
    let data = norm.normalize_dataset(&raw)?;
    let mut out = Outcome::new(cfg.out_dir()?);
    let total = cfg.pretrain.optim.total_steps;
    let mut log = Vec::with_capacity(total.saturating_sub(opt.step));
    while opt.step < total {
        log.push(pretrain_step(&mut model, &mut opt, &data, &sched, &cfg.pretrain, &mut rng)?);
        let done = opt.step;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total {
            let bytes = denoiser_checkpoint(cfg, &model, &opt, &sched, &norm, &rng)?;
            out.write(&format!("pretrain_step{done:06}.omgc"), &bytes)?;
        }
    }
    let bytes = denoiser_checkpoint(cfg, &model, &opt, &sched, &norm, &rng)?;
    out.write(PRETRAIN_FILE, &bytes)?;
    out.write("pretrain_log.jsonl", &json_lines(&log)?)?;
    out.write_config(cfg)?;
    out.summary = match (log.first(), log.last()) {
        (Some(a), Some(b)) => format!("steps {}..{}: loss {:.4} -> {:.4}", a.step, b.step, a.total, b.total),
        _ => "nothing to do: checkpoint already at the final step".into(),
    };
    Ok(out)
}

fn controlnet_checkpoint(
    cfg: &RunConfig,
    net: &ControlNetParams<f32>,
    opt: &AdamW<crate::controlnet::ControlBranch<f32>>,
    sched: &NoiseSchedule,
    norm: &FeatureNormalizer,
    rng: &ChaCha8Rng,
) -> Result<Vec<u8>> {
    let mut meta = CheckpointMeta::new(CheckpointKind::Controlnet, net.frozen.config, sched);
    meta.step = opt.step;
    meta.ablation = Some(cfg.ablation);
    meta.rng = Some(RngState::capture(rng));
    meta.normalizer = Some(norm.clone());
    meta.run_config = Some(cfg.recipe()?);
    Checkpoint::from_controlnet(meta, net, Some(opt)).to_bytes()
}

/// Standardized pairs from a labeled directory, embedded by `provider`.
fn paired_data(
    dir: &LabeledDir,
    norm: &FeatureNormalizer,
    provider: &dyn EmbeddingProvider,
    d_c: usize,
) -> Result<PairedData> {
    let prompts = dir.require_prompts()?;
    let examples = prompts
        .iter()
        .zip(&dir.data.clips)
        .map(|(p, seq)| {
            let cond = provider.embed(p)?;
            if cond.dim() != d_c {
                return Err(Error::InvalidConfig(format!("embeddings have width {} but moc.d_c is {d_c}", cond.dim())));
            }
            Ok(PairedExample { prompt: p.to_string(), motion: norm.normalize(seq.frames.view())?, cond })
        })
        .collect::<Result<_>>()?;
    Ok(PairedData { layout: dir.data.layout.clone(), examples, empty: provider.empty_token()? })
}

/// ControlNet fine-tuning on the captioned clips of `paths.pairs_dir`.
pub fn cmd_finetune(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let pairs_dir = require_dir(cfg.paths.pairs_dir.as_ref(), "pairs_dir")?;
    let base_path = require_file(cfg.paths.checkpoint.as_ref(), "checkpoint")?;
    let resume = cfg.paths.resume.as_ref().map(|p| require_file(Some(p), "resume")).transpose()?;
    let provider = cfg.provider()?;
    let (base_ck, _) = load_checkpoint(base_path, CheckpointKind::Denoiser)?;
    let sched = base_ck.schedule();
    let base = Arc::new(base_ck.denoiser()?);
    let dim = base.config.input_dim;
    let norm = base_ck.meta.normalizer.clone().unwrap_or_else(|| FeatureNormalizer::identity(dim));
    let dir = LabeledDir::load(pairs_dir)?;
    if dir.data.layout.dim() != dim {
        return Err(Error::CheckpointMismatch(format!("checkpoint takes {dim} channels, pairs have {}", dir.data.layout.dim())));
    }
    let moc = cfg.moc.with_ablation(cfg.ablation);
    let paired = paired_data(&dir, &norm, provider.as_ref(), moc.d_c)?;
    let (mut net, mut opt, mut rng) = match resume {
        Some(path) => {
            let (ck, _) = load_checkpoint(path, CheckpointKind::Controlnet)?;
            let net = ck.controlnet()?;
            if net.frozen_checksum != base.checksum() {
                return Err(Error::CheckpointMismatch("resume checkpoint was built on a different backbone".into()));
            }
            if net.moc_config() != moc || ck.meta.ablation != Some(cfg.ablation) {
                return Err(Error::CheckpointMismatch("resume checkpoint uses a different MoC config".into()));
            }
            let opt = ck.controlnet_optimizer(&net)?.ok_or_else(|| Error::CheckpointMismatch("no optimizer state".into()))?;
            (net, opt, restore_rng(&ck)?)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let net = ControlNetParams::build(base.clone(), moc, &mut rng)?;
            let opt = AdamW::new(&net.branch);
            (net, opt, rng)
        }
    };
    let mut out = Outcome::new(cfg.out_dir()?);
    let total = cfg.finetune.optim.total_steps;
    let mut log = Vec::with_capacity(total.saturating_sub(opt.step));
    while opt.step < total {
        log.push(finetune_step(&mut net, &mut opt, &paired, &sched, &cfg.finetune, &mut rng)?);
        let done = opt.step;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total {
            let bytes = controlnet_checkpoint(cfg, &net, &opt, &sched, &norm, &rng)?;
            out.write(&format!("finetune_step{done:06}.omgc"), &bytes)?;
        }
    }
    out.write(CONTROLNET_FILE, &controlnet_checkpoint(cfg, &net, &opt, &sched, &norm, &rng)?)?;
    out.write("finetune_log.jsonl", &json_lines(&log)?)?;
    out.write_config(cfg)?;
    out.summary = match (log.first(), log.last()) {
        (Some(a), Some(b)) => format!("steps {}..{}: loss {:.4} -> {:.4}", a.step, b.step, a.total, b.total),
        _ => "nothing to do: checkpoint already at the final step".into(),
    };
    Ok(out)
}

/// Thresholds contact channels at 0.5 so a decoded sample is a valid motion.
fn binarize_contacts(x: &mut Array2<f32>, layout: &FeatureLayout) {
    for c in layout.slice(SliceKind::FootContacts) {
        x.column_mut(c).mapv_inplace(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    }
}

/// Root height and root-relative joint positions, one row per frame.
pub fn joint_positions_csv(seq: &MotionSequence, layout: &FeatureLayout) -> String {
    let pos = layout.slice(SliceKind::JointPositions);
    let h = layout.slice(SliceKind::RootHeight).start;
    let mut s = String::from("frame,root_height");
    for j in 1..layout.joints {
        for a in ["x", "y", "z"] {
            s.push_str(&format!(",j{j}_{a}"));
        }
    }
    s.push('\n');
    for (i, row) in seq.frames.outer_iter().enumerate() {
        s.push_str(&format!("{i},{}", row[h]));
        for c in pos.clone() {
            s.push_str(&format!(",{}", row[c]));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub prompt: Option<String>,
    pub unconditional: bool,
    pub seed: u64,
    pub s: f64,
    pub steps: usize,
    pub eta: f64,
    pub length: usize,
    /// SHA-256 of every checkpoint read, keyed by role.
    pub checkpoints: BTreeMap<String, String>,
    pub files: Vec<SampleEntry>,
}

/// Draws `sample.count` motions, guided by `sample.prompt` through the
/// ControlNet, or unconditionally from the backbone.
pub fn cmd_sample(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let s = &cfg.sample;
    let layout = cfg.layout()?;
    let base_path = cfg.paths.checkpoint.as_ref().map(|p| require_file(Some(p), "checkpoint")).transpose()?;
    let ctrl_path = cfg.paths.controlnet.as_ref().map(|p| require_file(Some(p), "controlnet")).transpose()?;
    let prompt = match (&s.prompt, s.unconditional) {
        (_, true) => None,
        (Some(p), false) => Some(p.clone()),
        (None, false) => return Err(Error::InvalidConfig("sampling needs --prompt or --unconditional".into())),
    };
    if prompt.is_some() && ctrl_path.is_none() {
        return Err(Error::InvalidConfig("conditional sampling needs a controlnet checkpoint".into()));
    }
    if base_path.is_none() && ctrl_path.is_none() {
        return Err(Error::InvalidConfig("sampling needs a checkpoint or a controlnet".into()));
    }
    let provider = prompt.as_ref().map(|_| cfg.provider()).transpose()?;
    let mut hashes = BTreeMap::new();
    let mut net = None;
    let mut meta = None;
    if let Some(p) = ctrl_path {
        let (ck, hash) = load_checkpoint(p, CheckpointKind::Controlnet)?;
        hashes.insert("controlnet".to_string(), hash);
        net = Some(ck.controlnet()?);
        meta = Some(ck.meta);
    }
    let base: Arc<DenoiserParams<f32>> = match (base_path, &net) {
        (Some(p), net) => {
            let (ck, hash) = load_checkpoint(p, CheckpointKind::Denoiser)?;
            hashes.insert("checkpoint".to_string(), hash);
            let m = Arc::new(ck.denoiser()?);
            if let Some(n) = net {
                if n.frozen_checksum != m.checksum() {
                    return Err(Error::CheckpointMismatch("controlnet was built on a different backbone".into()));
                }
            }
            meta.get_or_insert(ck.meta);
            m
        }
        (None, Some(n)) => n.frozen.clone(),
        (None, None) => unreachable!("checked above"),
    };
    let meta = meta.expect("one checkpoint loaded");
    let dim = base.config.input_dim;
    if dim != layout.dim() {
        return Err(Error::CheckpointMismatch(format!("checkpoint takes {dim} channels, layout {} has {}", layout.name, layout.dim())));
    }
    base.check_len(s.length)?;
    let norm = meta.normalizer.clone().unwrap_or_else(|| FeatureNormalizer::identity(dim));
    let sched = meta.schedule.build();
    let tokens = match (&prompt, &provider, &net) {
        (Some(p), Some(prov), Some(n)) => {
            let cond = prov.embed(p)?;
            if cond.dim() != n.moc_config().d_c {
                return Err(Error::DimMismatch(format!(
                    "embeddings have width {}, controlnet expects {}",
                    cond.dim(),
                    n.moc_config().d_c
                )));
            }
            Some(TokenInput::<f32>::from_conditioning(&cond))
        }
        _ => None,
    };
    let cond = match (&net, &tokens) {
        (Some(net), Some(tokens)) => Some(Conditioned { net, tokens }),
        _ => None,
    };
    let mut out = Outcome::new(cfg.out_dir()?);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut files = Vec::with_capacity(s.count);
    let mut prompts = BTreeMap::new();
    for i in 0..s.count {
        let c = cond.as_ref().map(|c| c as &dyn Denoiser<f32>);
        let z = sample(&*base, c, &s.sampler, &sched, s.length, dim, &mut rng)?;
        let mut x = norm.denormalize(z.view())?;
        binarize_contacts(&mut x, &layout);
        let seq = MotionSequence::new(x, STANDARD_FPS, layout.id);
        seq.validate(&layout)?;
        let id = format!("sample_{i:03}");
        let name = format!("{id}.omgm");
        out.write(&name, &seq.to_bytes())?;
        files.push(SampleEntry { file: name.clone(), sha256: out.files[&name].clone() });
        if s.dump_csv {
            out.write(&format!("{id}.csv"), joint_positions_csv(&seq, &layout).as_bytes())?;
        }
        if let Some(p) = &prompt {
            prompts.insert(id, p.clone());
        }
    }
    if !prompts.is_empty() {
        out.write(PROMPTS_FILE, &serde_json::to_vec_pretty(&prompts)?)?;
    }
    let manifest = SampleManifest {
        prompt: prompt.clone(),
        unconditional: prompt.is_none(),
        seed: cfg.seed,
        s: s.sampler.guidance,
        steps: s.sampler.n_steps,
        eta: s.sampler.eta,
        length: s.length,
        checkpoints: hashes,
        files,
    };
    out.write(MANIFEST_FILE, &serde_json::to_vec_pretty(&manifest)?)?;
    out.write_config(cfg)?;
    out.summary = format!("wrote {} samples of {} frames", s.count, s.length);
    Ok(out)
}

/// Trains the text-aligned motion encoder used by the text-space metrics.
pub fn cmd_train_encoder(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let pairs_dir = require_dir(cfg.paths.pairs_dir.as_ref(), "pairs_dir")?;
    let provider = cfg.provider()?;
    let dir = LabeledDir::load(pairs_dir)?;
    let texts = text_rows(provider.as_ref(), &dir.require_prompts()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (enc, log) = train_contrastive_encoder(&dir.views(), texts.view(), cfg.encoder, &mut rng)?;
    let mut out = Outcome::new(cfg.out_dir()?);
    let p = out.out_dir.join(ENCODER_FILE);
    enc.save(&p)?;
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    out.files.insert(ENCODER_FILE.into(), sha256_hex(&bytes));
    #[derive(Serialize)]
    struct Row {
        step: usize,
        loss: f64,
    }
    let rows: Vec<Row> = log.iter().enumerate().map(|(step, &loss)| Row { step, loss }).collect();
    out.write("encoder_log.jsonl", &json_lines(&rows)?)?;
    out.write_config(cfg)?;
    out.summary = format!("contrastive loss {:.4} -> {:.4}", log[0], log[log.len() - 1]);
    Ok(out)
}

/// End-of-sequence embeddings, one row per prompt.
fn text_rows(provider: &dyn EmbeddingProvider, prompts: &[&str]) -> Result<Array2<f64>> {
    let rows = prompts.iter().map(|p| Ok(provider.embed(p)?.eos().mapv(f64::from))).collect::<Result<Vec<_>>>()?;
    crate::metrics::stack(&rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub generated: usize,
    pub reference: usize,
    pub records: Vec<MetricRecord>,
    /// Metrics that could not be computed, with the reason.
    pub skipped: BTreeMap<String, String>,
}

fn bootstrap<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// FID and diversity over any extractor; CLIP-score and R-precision when a
/// text-aligned encoder and captions are available. Each replicate resamples
/// both sets with replacement and redraws the random pairings.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let gen_dir = require_dir(cfg.paths.generated_dir.as_ref(), "generated_dir")?;
    let ref_dir = require_dir(cfg.paths.reference_dir.as_ref(), "reference_dir")?;
    let enc_path = cfg.paths.encoder.as_ref().map(|p| require_file(Some(p), "encoder")).transpose()?;
    let gen = LabeledDir::load(gen_dir)?;
    let reference = LabeledDir::load(ref_dir)?;
    if gen.data.layout != reference.data.layout {
        return Err(Error::LayoutMismatch);
    }
    let dim = gen.data.layout.dim();
    let encoder = enc_path.map(ContrastiveEncoder::load).transpose()?;
    if let Some(e) = &encoder {
        if e.input_dim() != dim {
            return Err(Error::DimensionMismatch { expected: e.input_dim(), found: dim });
        }
    }
    let stats = StatsExtractor { input_dim: dim };
    let extractor: &dyn FeatureExtractor = match &encoder {
        Some(e) => e,
        None => &stats,
    };
    let gf = extractor.extract_all(&gen.views())?;
    let rf = extractor.extract_all(&reference.views())?;
    let mut skipped = BTreeMap::new();
    let texts = match (&encoder, gen.require_prompts()) {
        (None, _) => {
            skipped.insert("text".into(), "no text-aligned encoder given".into());
            None
        }
        (Some(_), Err(e)) => {
            skipped.insert("text".into(), e.to_string());
            None
        }
        (Some(e), Ok(prompts)) => {
            let t = text_rows(cfg.provider()?.as_ref(), &prompts)?;
            if t.ncols() != e.text_dim() {
                return Err(Error::DimMismatch(format!("encoder maps to {} dims, text has {}", e.text_dim(), t.ncols())));
            }
            Some(normalize_rows(t.view())?)
        }
    };
    let (n_g, n_r) = (gf.nrows(), rf.nrows());
    let e = &cfg.eval;
    let pairs = e.diversity_pairs.min(n_g / 2);
    let pool = e.r_precision_pool.min(n_g);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for _ in 0..e.replicates {
        let gi = bootstrap(n_g, &mut rng);
        let ri = bootstrap(n_r, &mut rng);
        let ga = gf.select(Axis(0), &gi);
        let fid = frechet_distance(&FeatureStats::from_features(ga.view())?, &FeatureStats::from_features(rf.select(Axis(0), &ri).view())?)?;
        values.entry("fid").or_default().push(fid);
        if pairs >= 1 {
            values.entry("diversity").or_default().push(diversity(gf.view(), pairs, &mut rng)?);
        }
        if let Some(t) = &texts {
            values.entry("clip_score").or_default().push(clip_score(ga.view(), t.select(Axis(0), &gi).view())?);
            if pool >= 2 {
                values.entry("r_precision").or_default().push(r_precision(gf.view(), t.view(), pool, e.top_k, &mut rng)?);
            }
        }
    }
    if pairs == 0 {
        skipped.insert("diversity".into(), format!("{n_g} generated motions are too few"));
    }
    let id = extractor.id();
    let records = values
        .into_iter()
        .map(|(metric, v)| {
            let (mean, ci) = mean_ci95(&v);
            MetricRecord {
                metric: metric.to_string(),
                value: mean,
                n: n_g,
                seed: cfg.seed,
                extractor_id: id.clone(),
                ci95: Some(ci),
                replicates: Some(v.len()),
            }
        })
        .collect::<Vec<_>>();
    let report = MetricsReport { generated: n_g, reference: n_r, records, skipped };
    let mut out = Outcome::new(cfg.out_dir()?);
    out.write(METRICS_FILE, &serde_json::to_vec_pretty(&report)?)?;
    out.write_config(cfg)?;
    let mut summary = Vec::new();
    for r in &report.records {
        write!(summary, "{} {:.4} ± {:.4}; ", r.metric, r.value, r.ci95.unwrap_or(0.0)).expect("in-memory write");
    }
    out.summary = String::from_utf8(summary).expect("utf-8").trim_end_matches("; ").to_string();
    Ok(out)
}
