//! Text-to-vector encoders for prompts.
//!
//! The default [`HashingEmbedder`] splits text into lowercase word tokens,
//! hashes each token into one of `dim` buckets with a hash-derived sign, and
//! L2-normalizes the result. It is deterministic and platform independent,
//! and sits behind the [`Embedder`] trait so a learned encoder or a file of
//! precomputed vectors ([`PrecomputedEmbedder`]) can replace it.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SolarError};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a digest.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Lowercased tokens split on whitespace and punctuation.
pub fn tokenize_text(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Adds the signed hash of `token` into `out`.
pub(crate) fn add_hashed(out: &mut [f64], token: &str, weight: f64) {
    let h = fnv1a(token.as_bytes());
    let bucket = (h % out.len() as u64) as usize;
    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
    out[bucket] += sign * weight;
}

pub(crate) fn l2_normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub source_hash: u64,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub max_tokens: usize,
    pub normalize: bool,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            max_tokens: 384,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Euclidean,
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding>;
}

#[derive(Debug, Clone, Default)]
pub struct HashingEmbedder {
    pub cfg: EmbedderConfig,
}

impl HashingEmbedder {
    pub fn new(cfg: EmbedderConfig) -> Self {
        Self { cfg }
    }
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        embed(text, &self.cfg)
    }
}

pub fn embed(text: &str, cfg: &EmbedderConfig) -> Result<Embedding> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(SolarError::EmptyInput);
    }
    if cfg.dim == 0 {
        return Err(SolarError::Config("embedding dim must be positive".into()));
    }
    let source_hash = fnv1a(trimmed.as_bytes());
    let mut vector = vec![0.0; cfg.dim];
    for tok in tokenize_text(trimmed).iter().take(cfg.max_tokens) {
        add_hashed(&mut vector, tok, 1.0);
    }
    if vector.iter().all(|&v| v == 0.0) {
        // no tokens survived (or they cancelled): fall back to the text digest
        vector[(source_hash % cfg.dim as u64) as usize] = 1.0;
    }
    if cfg.normalize {
        l2_normalize(&mut vector);
    }
    Ok(Embedding {
        vector,
        source_hash,
    })
}

pub fn similarity(a: &Embedding, b: &Embedding, metric: Metric) -> Result<f64> {
    vector_similarity(&a.vector, &b.vector, metric)
}

pub fn vector_similarity(a: &[f64], b: &[f64], metric: Metric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SolarError::Shape(format!(
            "embedding dims {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(match metric {
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                (dot / (na * nb)).clamp(-1.0, 1.0)
            }
        }
        Metric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
    })
}

/// Element-wise mean of equal-length vectors.
pub fn mean_vector(vs: &[&[f64]]) -> Vec<f64> {
    let dim = vs.first().map_or(0, |v| v.len());
    let mut out = vec![0.0; dim];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    let n = vs.len().max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Embeddings looked up by text digest, loaded from the precomputed-vectors
/// text format (`<hex digest> <f64> <f64> ...` per line).
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEmbedder {
    dim: usize,
    table: HashMap<u64, Vec<f64>>,
    fallback: Option<HashingEmbedder>,
}

impl PrecomputedEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn with_fallback(mut self, fallback: HashingEmbedder) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn insert(&mut self, text: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(SolarError::Shape(format!(
                "expected dim {}, got {}",
                self.dim,
                vector.len()
            )));
        }
        self.table.insert(fnv1a(text.trim().as_bytes()), vector);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn read_from(reader: impl BufRead) -> Result<Self> {
        let mut out = PrecomputedEmbedder::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_ascii_whitespace();
            let hash_str = parts.next().unwrap_or_default();
            let hash = u64::from_str_radix(hash_str, 16).map_err(|e| SolarError::Parse {
                line: line_no,
                message: format!("bad digest {hash_str:?}: {e}"),
            })?;
            let vector = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|e| SolarError::Parse {
                        line: line_no,
                        message: format!("bad float {p:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if out.dim == 0 {
                out.dim = vector.len();
            }
            if vector.len() != out.dim || vector.is_empty() {
                return Err(SolarError::Parse {
                    line: line_no,
                    message: format!("expected {} floats, got {}", out.dim, vector.len()),
                });
            }
            out.table.insert(hash, vector);
        }
        Ok(out)
    }

    /// Writes records sorted by digest so output bytes are reproducible.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut keys: Vec<_> = self.table.keys().copied().collect();
        keys.sort_unstable();
        for k in keys {
            let mut line = format!("{k:016x}");
            for v in &self.table[&k] {
                write!(line, " {v:?}").expect("string write");
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

impl Embedder for PrecomputedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(SolarError::EmptyInput);
        }
        let source_hash = fnv1a(trimmed.as_bytes());
        match (self.table.get(&source_hash), &self.fallback) {
            (Some(v), _) => Ok(Embedding {
                vector: v.clone(),
                source_hash,
            }),
            (None, Some(fb)) => fb.embed(trimmed),
            (None, None) => Err(SolarError::Config(format!(
                "no precomputed embedding for digest {source_hash:016x}"
            ))),
        }
    }
}
