//! `.omgc` tensor container: magic, version, a JSON metadata block, then
//! named `f32` tensors. ControlNet checkpoints carry their frozen tensors
//! under `frozen.` so they load without the pretraining file.
//!
//! ```text
//! "OMGC" | u32 version | u32 meta_len | meta JSON | u32 count |
//!   count × (u32 name_len | name | u32 rank | rank × u32 dim | f32 LE data)
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{DenoiserParams, ModelConfig};
use crate::bytes::Reader;
use crate::controlnet::{ControlBranch, ControlNetParams};
use crate::data::FeatureNormalizer;
use crate::error::{Error, Result};
use crate::moc::{Ablation, MoCConfig, MoCParams};
use crate::nn::{hex_digest, join, ParamTree};
use crate::optim::AdamW;
use crate::schedule::{NoiseSchedule, Parameterization, ScheduleKind};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"OMGC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const FROZEN_PREFIX: &str = "frozen";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Denoiser,
    Controlnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub kind: ScheduleKind,
    pub parameterization: Parameterization,
    pub t_max: usize,
}

impl From<&NoiseSchedule> for ScheduleMeta {
    fn from(s: &NoiseSchedule) -> Self {
        Self { kind: s.kind, parameterization: s.parameterization, t_max: s.t_max() }
    }
}

impl ScheduleMeta {
    pub fn build(&self) -> NoiseSchedule {
        match self.kind {
            ScheduleKind::Cosine => NoiseSchedule::cosine(self.t_max).with_parameterization(self.parameterization),
        }
    }
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position as decimal text (JSON numbers are not wide enough).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex_digest(&rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::CheckpointMismatch("unreadable rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    /// Optimizer updates applied so far.
    pub step: usize,
    pub schedule: ScheduleMeta,
    #[serde(default)]
    pub moc: Option<MoCConfig>,
    #[serde(default)]
    pub ablation: Option<Ablation>,
    #[serde(default)]
    pub frozen_tensors: Vec<String>,
    #[serde(default)]
    pub trainable_tensors: Vec<String>,
    #[serde(default)]
    pub frozen_checksum: Option<String>,
    #[serde(default)]
    pub has_optimizer: bool,
    #[serde(default)]
    pub rng: Option<RngState>,
    /// Standardization the model was trained under; samples are mapped back
    /// through it.
    #[serde(default)]
    pub normalizer: Option<FeatureNormalizer>,
    /// Effective configuration of the run that wrote the file.
    #[serde(default)]
    pub run_config: Option<serde_json::Value>,
}

impl CheckpointMeta {
    pub fn new(kind: CheckpointKind, model: ModelConfig, schedule: &NoiseSchedule) -> Self {
        Self {
            kind,
            model,
            step: 0,
            schedule: schedule.into(),
            moc: None,
            ablation: None,
            frozen_tensors: Vec::new(),
            trainable_tensors: Vec::new(),
            frozen_checksum: None,
            has_optimizer: false,
            rng: None,
            normalizer: None,
            run_config: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

fn collect<P: ParamTree<f32>>(tree: &P, prefix: &str) -> Vec<(String, ArrayD<f32>)> {
    tree.named().into_iter().map(|(n, t)| (join(prefix, &n), t.to_owned())).collect()
}

fn names(tensors: &[(String, ArrayD<f32>)]) -> Vec<String> {
    tensors.iter().map(|(n, _)| n.clone()).collect()
}

impl Checkpoint {
    pub fn from_denoiser(mut meta: CheckpointMeta, model: &DenoiserParams<f32>, opt: Option<&AdamW<DenoiserParams<f32>>>) -> Self {
        meta.kind = CheckpointKind::Denoiser;
        meta.model = model.config;
        let mut tensors = collect(model, "");
        meta.trainable_tensors = names(&tensors);
        meta.frozen_tensors.clear();
        meta.has_optimizer = opt.is_some();
        if let Some(o) = opt {
            tensors.extend(collect(&o.m, "adam.m"));
            tensors.extend(collect(&o.v, "adam.v"));
        }
        Self { meta, tensors }
    }

    pub fn from_controlnet(mut meta: CheckpointMeta, net: &ControlNetParams<f32>, opt: Option<&AdamW<ControlBranch<f32>>>) -> Self {
        meta.kind = CheckpointKind::Controlnet;
        meta.model = net.frozen.config;
        meta.moc = Some(net.moc_config());
        meta.frozen_checksum = Some(net.frozen_checksum.clone());
        let frozen = collect(&*net.frozen, FROZEN_PREFIX);
        let trainable = collect(&net.branch, "");
        meta.frozen_tensors = names(&frozen);
        meta.trainable_tensors = names(&trainable);
        meta.has_optimizer = opt.is_some();
        let mut tensors = frozen;
        tensors.extend(trainable);
        if let Some(o) = opt {
            tensors.extend(collect(&o.m, "adam.m"));
            tensors.extend(collect(&o.v, "adam.v"));
        }
        Self { meta, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        if let Some(norm) = &meta.normalizer {
            norm.validate()?;
            if norm.dim() != meta.model.input_dim {
                return Err(Error::CheckpointMismatch(format!(
                    "normalizer covers {} channels, model takes {}",
                    norm.dim(),
                    meta.model.input_dim
                )));
            }
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|e| Error::Malformed(e.to_string()))?.to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes_len = numel.and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::Malformed(format!("tensor {name} too large")))?;
            let raw = r.take(bytes_len)?;
            let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| Error::Malformed(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { meta, tensors })
    }

    /// Writes the file and returns the SHA-256 of its bytes.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn schedule(&self) -> NoiseSchedule {
        self.meta.schedule.build()
    }

    fn lookup(&self) -> HashMap<&str, &ArrayD<f32>> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    /// The denoiser stored in the file: the whole model for a pretraining
    /// checkpoint, the frozen backbone for a ControlNet one.
    pub fn denoiser(&self) -> Result<DenoiserParams<f32>> {
        self.meta.model.validate()?;
        let mut model = DenoiserParams::zeros(self.meta.model);
        let prefix = match self.meta.kind {
            CheckpointKind::Denoiser => "",
            CheckpointKind::Controlnet => FROZEN_PREFIX,
        };
        fill(&mut model, prefix, &self.lookup())?;
        Ok(model)
    }

    pub fn denoiser_optimizer(&self) -> Result<Option<AdamW<DenoiserParams<f32>>>> {
        self.expect_kind(CheckpointKind::Denoiser)?;
        if !self.meta.has_optimizer {
            return Ok(None);
        }
        let table = self.lookup();
        let mut m = DenoiserParams::zeros(self.meta.model);
        let mut v = m.clone();
        fill(&mut m, "adam.m", &table)?;
        fill(&mut v, "adam.v", &table)?;
        Ok(Some(AdamW { m, v, step: self.meta.step }))
    }

    pub fn controlnet(&self) -> Result<ControlNetParams<f32>> {
        self.expect_kind(CheckpointKind::Controlnet)?;
        let frozen = Arc::new(self.denoiser()?);
        let mut branch = self.empty_branch(&frozen)?;
        fill(&mut branch, "", &self.lookup())?;
        let checksum = self
            .meta
            .frozen_checksum
            .clone()
            .ok_or_else(|| Error::CheckpointMismatch("ControlNet checkpoint without frozen checksum".into()))?;
        ControlNetParams::from_parts(frozen, branch, checksum)
    }

    pub fn controlnet_optimizer(&self, net: &ControlNetParams<f32>) -> Result<Option<AdamW<ControlBranch<f32>>>> {
        self.expect_kind(CheckpointKind::Controlnet)?;
        if !self.meta.has_optimizer {
            return Ok(None);
        }
        let table = self.lookup();
        let mut m = net.branch.zeroed();
        let mut v = net.branch.zeroed();
        fill(&mut m, "adam.m", &table)?;
        fill(&mut v, "adam.v", &table)?;
        Ok(Some(AdamW { m, v, step: self.meta.step }))
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::CheckpointMismatch(format!("expected a {kind:?} checkpoint, found {:?}", self.meta.kind)));
        }
        Ok(())
    }

    fn empty_branch(&self, frozen: &DenoiserParams<f32>) -> Result<ControlBranch<f32>> {
        let moc = self.meta.moc.ok_or_else(|| Error::CheckpointMismatch("ControlNet checkpoint without MoC config".into()))?;
        moc.validate()?;
        // values are overwritten from the file; the rng only shapes the tensors
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let blocks = (0..frozen.layers.len())
            .map(|_| MoCParams::init(moc, frozen.config.d_model, &mut rng))
            .collect::<Result<_>>()?;
        Ok(ControlBranch { copy: frozen.layers.clone(), moc: blocks })
    }
}

/// Copies `prefix.<name>` tensors from `table` into `tree`, insisting on
/// matching names and shapes.
fn fill<P: ParamTree<f32>>(tree: &mut P, prefix: &str, table: &HashMap<&str, &ArrayD<f32>>) -> Result<()> {
    for (name, mut dst) in tree.named_mut() {
        let full = join(prefix, &name);
        let src = table.get(full.as_str()).ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {full}")))?;
        if src.shape() != dst.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {full} has shape {:?}, expected {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.assign(src);
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_digest(&Sha256::digest(bytes))
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
