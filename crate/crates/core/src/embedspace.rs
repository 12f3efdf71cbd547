//! Embedding tables, similarity scales and the CVEM file format.
//!
//! Two similarity scales are in use and they are kept apart by type:
//! [`Cosine`] in `[-1, 1]` (retrieval and the contrastive loss) and
//! [`NormalizedSim`] in `[0, 1]` (all filter thresholds), related by
//! `s = (1 + cos) / 2`.
//!
//! CVEM layout, all integers little-endian:
//!
//! ```text
//! "CVEM" | u32 version = 1 | u32 dim | u64 count |
//! count × ( u16 id_len | id bytes (UTF-8) | dim × f32 )
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::normalize_caption;

pub const CVEM_MAGIC: &[u8; 4] = b"CVEM";
pub const CVEM_VERSION: u32 = 1;

/// Vectors whose norm is this close to one are stored verbatim, which keeps
/// `load(save(x)) == x` bit-exact.
const UNIT_SLACK: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("bad magic bytes (expected CVEM)")]
    BadMagic,
    #[error("unsupported CVEM version {0}")]
    Version(u32),
    #[error("truncated CVEM file: {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after the last record")]
    TrailingData(usize),
    #[error("duplicate embedding id {0:?}")]
    DuplicateId(String),
    #[error("embedding {0:?} has zero norm")]
    ZeroNorm(String),
    #[error("embedding {0:?} has non-finite components")]
    NonFinite(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("id {0:?} longer than 65535 bytes")]
    IdTooLong(String),
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("invalid id {0:?}: not UTF-8")]
    BadId(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw cosine similarity in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Cosine(pub f64);

/// Similarity mapped to `[0, 1]` by `(1 + cos) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizedSim(pub f64);

impl Cosine {
    pub fn normalized(self) -> NormalizedSim {
        NormalizedSim((1.0 + self.0) / 2.0)
    }
}

impl NormalizedSim {
    pub fn to_cosine(self) -> Cosine {
        Cosine(2.0 * self.0 - 1.0)
    }
}

pub(crate) fn dot_f32(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Dot product of two unit vectors, clamped to `[-1, 1]` to absorb f32
/// rounding of the stored norms.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<Cosine, EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::DimMismatch { expected: u.len(), got: v.len() });
    }
    Ok(Cosine(dot_f32(u, v).clamp(-1.0, 1.0)))
}

pub fn normalized_similarity(u: &[f32], v: &[f32]) -> Result<NormalizedSim, EmbedError> {
    cosine(u, v).map(Cosine::normalized)
}

/// Unit-normalize in place; returns `false` (leaving `v` untouched) for the
/// zero vector.
pub fn normalize_f64(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

fn unit_f32(v: &[f32]) -> Option<Vec<f32>> {
    let norm = dot_f32(v, v).sqrt();
    if norm == 0.0 {
        return None;
    }
    if (norm - 1.0).abs() <= UNIT_SLACK {
        return Some(v.to_vec());
    }
    Some(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

fn token_seed(token: &str) -> u64 {
    let digest = Sha256::digest(format!("covr-toy\u{1f}{token}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Gaussian vector assigned to one token by the toy embedder.
pub fn toy_token_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(token_seed(token));
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Deterministic bag-of-tokens embedding: the normalized sum of one seeded
/// Gaussian vector per caption token. Texts sharing more tokens have higher
/// expected cosine. Text without tokens maps to a fixed vector.
pub fn toy_embed(text: &str, dim: usize) -> Vec<f32> {
    assert!(dim >= 2, "toy_embed needs dim >= 2");
    let mut tokens = normalize_caption(text);
    if tokens.is_empty() {
        tokens.push("\u{0}empty".to_owned());
    }
    let mut acc = vec![0.0f64; dim];
    for tok in &tokens {
        for (a, x) in acc.iter_mut().zip(toy_token_vector(tok, dim)) {
            *a += x;
        }
    }
    if !normalize_f64(&mut acc) {
        // only reachable when the token vectors cancel exactly
        acc = vec![0.0; dim];
        acc[0] = 1.0;
    }
    acc.into_iter().map(|x| x as f32).collect()
}

pub fn frame_id(video_id: &str, frame_index: usize) -> String {
    format!("{video_id}#{frame_index}")
}

/// Immutable id → unit vector table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    /// Build a store, unit-normalizing every vector.
    pub fn from_entries<I, S>(dim: usize, entries: I) -> Result<Self, EmbedError>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        let mut store = EmbeddingStore {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        };
        for (id, v) in entries {
            store.push(id.into(), &v)?;
        }
        Ok(store)
    }

    fn push(&mut self, id: String, v: &[f32]) -> Result<(), EmbedError> {
        if v.len() != self.dim {
            return Err(EmbedError::DimMismatch { expected: self.dim, got: v.len() });
        }
        if id.len() > u16::MAX as usize {
            return Err(EmbedError::IdTooLong(id));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::NonFinite(id));
        }
        let unit = unit_f32(v).ok_or_else(|| EmbedError::ZeroNorm(id.clone()))?;
        if self.index.contains_key(&id) {
            return Err(EmbedError::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(&unit);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.row(i))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), self.row(i)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.data.len() * 4 + self.ids.len() * 16);
        out.extend_from_slice(CVEM_MAGIC);
        out.extend_from_slice(&CVEM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for (id, v) in self.iter() {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbedError> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        if cur.take(4, "magic")? != CVEM_MAGIC {
            return Err(EmbedError::BadMagic);
        }
        let version = cur.u32("version")?;
        if version != CVEM_VERSION {
            return Err(EmbedError::Version(version));
        }
        let dim = cur.u32("dim")? as usize;
        let count = cur.u64("count")?;
        let mut store = EmbeddingStore::from_entries::<_, String>(dim, [])?;
        for _ in 0..count {
            let len = cur.u16("id length")? as usize;
            let raw = cur.take(len, "id")?;
            let id = std::str::from_utf8(raw)
                .map_err(|_| EmbedError::BadId(String::from_utf8_lossy(raw).into_owned()))?
                .to_owned();
            let comps = cur.take(dim * 4, "vector")?;
            let v: Vec<f32> = comps
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            store.push(id, &v)?;
        }
        if cur.pos != bytes.len() {
            return Err(EmbedError::TrailingData(bytes.len() - cur.pos));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let store = Self::from_bytes(&bytes)?;
        log::info!("loaded {} embeddings (dim {}) from {}", store.len(), store.dim, path.display());
        Ok(store)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], EmbedError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(EmbedError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, EmbedError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, EmbedError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, EmbedError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
