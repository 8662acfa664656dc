//! Per-token text embeddings in CLIP space.
//!
//! Two providers sit behind [`EmbeddingProvider`]: [`EmbeddingTable`], which
//! serves records read from an `.omge` file written by the offline exporter,
//! and [`StubEmbedder`], a deterministic hash-seeded substitute used by tests
//! and desk-scale runs.
//!
//! `.omge` layout (little-endian): magic `OMGE`, version `u32 = 1`, record
//! count `u32`; per record: prompt hash `u64` (FNV-1a over the UTF-8 bytes),
//! `n: u16`, `d_c: u16`, `eos_index: u16`, then `n * d_c` `f32` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::bytes::Reader;
use crate::error::{Error, Result};
use crate::nn::{lit, Real};

pub const CLIP_DIM: usize = 768;
pub const MAX_TOKENS: usize = 77;
pub const EMBED_MAGIC: [u8; 4] = *b"OMGE";
pub const EMBED_VERSION: u32 = 1;
pub const EOS_TOKEN: &str = "<eos>";

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    File,
    Stub,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextConditioning {
    /// `n × d_c`
    pub embeddings: Array2<f32>,
    pub eos_index: usize,
    pub token_mask: Vec<bool>,
    pub source: EmbeddingSource,
}

impl TextConditioning {
    pub fn new(embeddings: Array2<f32>, eos_index: usize, source: EmbeddingSource) -> Result<Self> {
        let n = embeddings.nrows();
        let cond = Self { token_mask: vec![true; n], embeddings, eos_index, source };
        cond.validate()?;
        Ok(cond)
    }

    pub fn n_tokens(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn eos(&self) -> ArrayView1<'_, f32> {
        self.embeddings.row(self.eos_index)
    }

    pub fn embeddings_as<F: Real>(&self) -> Array2<F> {
        self.embeddings.mapv(|v| lit(v as f64))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_tokens();
        if n == 0 {
            return Err(Error::EmptyPrompt);
        }
        if n > MAX_TOKENS {
            return Err(Error::TokenOverflow(n));
        }
        if self.eos_index >= n || !self.token_mask[self.eos_index] {
            return Err(Error::Malformed(format!("eos index {} invalid for {n} tokens", self.eos_index)));
        }
        if self.token_mask.len() != n {
            return Err(Error::ShapeMismatch("token mask length differs from token count".into()));
        }
        if let Some(((frame, channel), _)) = self.embeddings.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteValue { frame, channel });
        }
        Ok(())
    }
}

/// Maps prompts to per-token conditioning. Implementations are deterministic
/// per prompt and read-only after construction.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, prompt: &str) -> Result<TextConditioning>;

    /// The empty prompt's end-of-sequence embedding, substituted by
    /// [`eos_dropout`].
    fn empty_token(&self) -> Result<Array1<f32>>;
}

/// Hash-seeded token embedder standing in for a CLIP text encoder.
///
/// Tokens are whitespace-separated words. Each word maps to a unit vector
/// drawn with SplitMix64 seeded by the word's FNV-1a hash, using the
/// Box-Muller transform (both outputs of each pair). The appended `<eos>`
/// row is the normalized mean of the word vectors, so prompts sharing words
/// have correlated summaries.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    pub dim: usize,
}

impl Default for StubEmbedder {
    fn default() -> Self {
        Self { dim: CLIP_DIM }
    }
}

impl StubEmbedder {
    pub fn with_dim(dim: usize) -> Self {
        assert!(dim >= 2 && dim % 2 == 0, "stub dimension must be even");
        Self { dim }
    }

    pub fn token_vector(&self, token: &str) -> Array1<f32> {
        hashed_unit_vector(fnv1a64(token.as_bytes()), self.dim)
    }
}

pub(crate) fn hashed_unit_vector(seed: u64, dim: usize) -> Array1<f32> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let scale = 1.0 / (1u64 << 53) as f64;
    let mut v = Vec::with_capacity(dim);
    while v.len() < dim {
        let u1 = ((rng.next_u64() >> 11) as f64 + 1.0) * scale;
        let u2 = (rng.next_u64() >> 11) as f64 * scale;
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        v.push(r * theta.cos());
        v.push(r * theta.sin());
    }
    v.truncate(dim);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x / norm) as f32).collect()
}

impl EmbeddingProvider for StubEmbedder {
    fn embed(&self, prompt: &str) -> Result<TextConditioning> {
        let words: Vec<&str> = prompt.split_whitespace().take(MAX_TOKENS - 1).collect();
        if words.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let n = words.len() + 1;
        let mut emb = Array2::zeros((n, self.dim));
        let mut sum = vec![0.0f64; self.dim];
        for (i, w) in words.iter().enumerate() {
            let v = self.token_vector(w);
            for (s, &x) in sum.iter_mut().zip(v.iter()) {
                *s += x as f64;
            }
            emb.row_mut(i).assign(&v);
        }
        let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (j, s) in sum.iter().enumerate() {
            emb[[n - 1, j]] = (s / norm) as f32;
        }
        TextConditioning::new(emb, n - 1, EmbeddingSource::Stub)
    }

    fn empty_token(&self) -> Result<Array1<f32>> {
        Ok(hashed_unit_vector(fnv1a64(b""), self.dim))
    }
}

/// One `.omge` record.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub prompt_hash: u64,
    pub eos_index: usize,
    pub embeddings: Array2<f32>,
}

/// Records loaded from an `.omge` file, keyed by prompt hash.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    pub records: BTreeMap<u64, TextConditioning>,
    /// Record order as stored on disk.
    pub order: Vec<u64>,
}

impl EmbeddingTable {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != EMBED_MAGIC {
            return Err(Error::BadMagic { expected: EMBED_MAGIC, found: magic });
        }
        let version = r.u32()?;
        if version != EMBED_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let mut table = Self::default();
        for rec in 0..count {
            let hash = r.u64()?;
            let n = r.u16()? as usize;
            let d = r.u16()? as usize;
            let eos = r.u16()? as usize;
            if n > MAX_TOKENS {
                return Err(Error::TokenOverflow(n));
            }
            let raw = r.take(n * d * 4)?;
            let values: Vec<f32> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { frame: rec, channel: pos });
            }
            let emb = Array2::from_shape_vec((n, d), values).map_err(|e| Error::Malformed(e.to_string()))?;
            let cond = TextConditioning::new(emb, eos, EmbeddingSource::File)?;
            table.order.push(hash);
            table.records.insert(hash, cond);
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn insert(&mut self, prompt: &str, cond: TextConditioning) {
        let h = fnv1a64(prompt.as_bytes());
        if self.records.insert(h, cond).is_none() {
            self.order.push(h);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&EMBED_MAGIC);
        out.extend_from_slice(&EMBED_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.order.len() as u32).to_le_bytes());
        for h in &self.order {
            let c = &self.records[h];
            out.extend_from_slice(&h.to_le_bytes());
            out.extend_from_slice(&(c.n_tokens() as u16).to_le_bytes());
            out.extend_from_slice(&(c.dim() as u16).to_le_bytes());
            out.extend_from_slice(&(c.eos_index as u16).to_le_bytes());
            for &v in c.embeddings.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, prompt: &str) -> Option<&TextConditioning> {
        self.records.get(&fnv1a64(prompt.as_bytes()))
    }
}

impl EmbeddingProvider for EmbeddingTable {
    fn embed(&self, prompt: &str) -> Result<TextConditioning> {
        self.get(prompt).cloned().ok_or_else(|| Error::UnknownPrompt(prompt.to_string()))
    }

    fn empty_token(&self) -> Result<Array1<f32>> {
        let c = self.get("").ok_or_else(|| Error::UnknownPrompt(String::new()))?;
        Ok(c.eos().to_owned())
    }
}

/// Table lookup that falls back to the stub for prompts missing from the file.
pub struct FallbackProvider {
    pub table: EmbeddingTable,
    pub stub: StubEmbedder,
}

impl EmbeddingProvider for FallbackProvider {
    fn embed(&self, prompt: &str) -> Result<TextConditioning> {
        match self.table.embed(prompt) {
            Err(Error::UnknownPrompt(_)) => self.stub.embed(prompt),
            other => other,
        }
    }

    fn empty_token(&self) -> Result<Array1<f32>> {
        self.table.empty_token().or_else(|_| self.stub.empty_token())
    }
}

/// Replaces the end-of-sequence row with `empty` with probability `p`.
/// Returns whether the replacement happened.
pub fn eos_dropout<R: Rng + ?Sized>(cond: &mut TextConditioning, empty: ArrayView1<f32>, p: f64, rng: &mut R) -> bool {
    let replace = p > 0.0 && (p >= 1.0 || rng.random_bool(p));
    if replace {
        let e = cond.eos_index;
        cond.embeddings.row_mut(e).assign(&empty);
    }
    replace
}
