use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CorpusError;
use crate::text::word_tokens;

/// Unit-norm dense vector with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes `values` to unit length. Fails on non-finite entries or a
    /// zero vector.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbedError::ZeroVector);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity; both sides are unit-norm so this is the dot product.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding has non-finite entries")]
    NonFinite,
    #[error("embedding is the zero vector")]
    ZeroVector,
    #[error("embedder returned dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("embedder backend unavailable: {0}")]
    Unavailable(String),
}

pub trait Embedder: Send + Sync {
    /// Stable identifier; part of every embedding cache key.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

/// Deterministic bag-of-words embedder: each lowercased token is hashed into
/// one of `dim` buckets, counts are L2-normalized.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

pub const DEFAULT_EMBED_DIM: usize = 512;

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dim as u64) as usize
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBED_DIM)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl Embedder for HashEmbedder {
    fn id(&self) -> String {
        format!("token-hash-v1-d{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut values = vec![0.0; self.dim];
        let tokens = word_tokens(trimmed);
        if tokens.is_empty() {
            // punctuation-only text still needs a deterministic vector
            values[self.bucket(trimmed)] = 1.0;
        }
        for token in &tokens {
            values[self.bucket(token)] += 1.0;
        }
        EmbeddingVector::normalized(values)
    }
}

/// Concurrent embedding cache keyed by embedder id and text digest, with an
/// optional on-disk snapshot.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<String, EmbeddingVector>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    entries: HashMap<String, EmbeddingVector>,
}

impl EmbeddingCache {
    pub fn key(embedder_id: &str, text: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(embedder_id.as_bytes());
        hasher.update([0u8]);
        hasher.update(text.as_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: CacheFile =
            serde_json::from_str(&raw).map_err(|e| CorpusError::EmbeddingCache(e.to_string()))?;
        Ok(Self {
            entries: RwLock::new(file.entries),
            ..Self::default()
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let entries = self.entries.read().expect("cache lock").clone();
        let raw = serde_json::to_string(&CacheFile { entries })
            .map_err(|e| CorpusError::EmbeddingCache(e.to_string()))?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        fs::write(path, raw).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn get_or_embed(
        &self,
        embedder: &dyn Embedder,
        text: &str,
    ) -> Result<EmbeddingVector, EmbedError> {
        let key = Self::key(&embedder.id(), text);
        if let Some(v) = self.entries.read().expect("cache lock").get(&key) {
            if v.dim() == embedder.dim() {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(v.clone());
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let vector = embedder.embed(text)?;
        if vector.dim() != embedder.dim() {
            return Err(EmbedError::Dimension {
                expected: embedder.dim(),
                got: vector.dim(),
            });
        }
        // identical keys always carry identical vectors, so last write wins
        self.entries
            .write()
            .expect("cache lock")
            .insert(key, vector.clone());
        Ok(vector)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_unit_norm() {
        let e = HashEmbedder::default();
        let a = e.embed("graph neural network").unwrap();
        let b = e.embed("graph neural network").unwrap();
        assert_eq!(a, b);
        for text in ["x", "graph neural network", "!!!", "a a a b"] {
            let v = e.embed(text).unwrap();
            assert!((v.norm() - 1.0).abs() < 1e-6, "{text}");
        }
    }

    #[test]
    fn plural_is_closer_than_unrelated() {
        // Hand computation on token sets, assuming no bucket collisions:
        // {graph, neural, network} vs {graph, neural, networks} share 2 of 3
        // tokens, cosine = 2 / (sqrt(3) * sqrt(3)) = 2/3; vs {protein, folding}
        // share nothing, cosine = 0.
        let e = HashEmbedder::default();
        let base = e.embed("graph neural network").unwrap();
        let plural = e.embed("graph neural networks").unwrap();
        let other = e.embed("protein folding").unwrap();
        assert!((base.cosine(&plural) - 2.0 / 3.0).abs() < 1e-12);
        assert!(base.cosine(&other).abs() < 1e-12);
        assert!(base.cosine(&plural) > base.cosine(&other));
    }

    #[test]
    fn empty_text_rejected() {
        assert!(matches!(
            HashEmbedder::default().embed("  "),
            Err(EmbedError::EmptyText)
        ));
    }

    #[test]
    fn cache_counts_hits() {
        let e = HashEmbedder::new(64);
        let cache = EmbeddingCache::default();
        cache.get_or_embed(&e, "alpha beta").unwrap();
        cache.get_or_embed(&e, "alpha beta").unwrap();
        assert_eq!(cache.misses(), 1);
        assert_eq!(cache.hits(), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.json");
        cache.save(&path).unwrap();
        let reloaded = EmbeddingCache::load(&path).unwrap();
        reloaded.get_or_embed(&e, "alpha beta").unwrap();
        assert_eq!(reloaded.hits(), 1);
        assert_eq!(reloaded.misses(), 0);
    }
}
