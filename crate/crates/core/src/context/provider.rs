use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha1::Sha1;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{NamedTensors, Tensor};

/// Width of token and sentence embeddings.
pub const EMBEDDING_DIM: usize = 768;

/// Source of token and sentence vectors. Implementations must be deterministic.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// Vector for `token` as it appears in `sentence`, shape `[dim]`.
    fn token_embedding(&self, token: &str, sentence: &str) -> Result<Tensor>;

    /// Vector for a whole sentence, shape `[dim]`.
    fn sentence_embedding(&self, sentence: &str) -> Result<Tensor>;
}

/// Unit-norm vectors derived from a SHA-256 of the seed and text. Token vectors ignore
/// the sentence they appear in.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbeddingProvider {
    seed: u64,
    dim: usize,
}

impl HashEmbeddingProvider {
    pub fn new(seed: u64) -> Self {
        Self::with_dim(seed, EMBEDDING_DIM)
    }

    pub fn with_dim(seed: u64, dim: usize) -> Self {
        HashEmbeddingProvider { seed, dim }
    }

    fn vector(&self, kind: &[u8], text: &str) -> Tensor {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(kind);
        hasher.update(text.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Tensor::from_parts(vec![self.dim], v)
    }
}

impl EmbeddingProvider for HashEmbeddingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn token_embedding(&self, token: &str, _sentence: &str) -> Result<Tensor> {
        Ok(self.vector(b"tok\0", token))
    }

    fn sentence_embedding(&self, sentence: &str) -> Result<Tensor> {
        Ok(self.vector(b"sent\0", sentence))
    }
}

/// Precomputed vectors loaded from a named-tensor container keyed by
/// `tok:{sha1(text)}` and `sent:{sha1(text)}`.
#[derive(Debug, Clone)]
pub struct StoredEmbeddingProvider {
    table: NamedTensors,
    dim: usize,
}

impl StoredEmbeddingProvider {
    pub fn new(table: NamedTensors) -> Result<Self> {
        let mut dim = None;
        for (name, t) in table.iter() {
            if t.rank() != 1 {
                return Err(Error::Format(format!("embedding `{name}` has shape {:?}, expected a vector", t.shape())));
            }
            match dim {
                None => dim = Some(t.numel()),
                Some(d) if d != t.numel() => {
                    return Err(Error::Format(format!("embedding `{name}` has width {}, expected {d}", t.numel())));
                }
                Some(_) => {}
            }
        }
        Ok(StoredEmbeddingProvider {
            table,
            dim: dim.unwrap_or(EMBEDDING_DIM),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(NamedTensors::load(path)?)
    }

    pub fn token_key(text: &str) -> String {
        format!("tok:{}", sha1_hex(text))
    }

    pub fn sentence_key(text: &str) -> String {
        format!("sent:{}", sha1_hex(text))
    }

    fn lookup(&self, key: String, text: &str) -> Result<Tensor> {
        self.table
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::Input(format!("no stored embedding for `{text}` ({key})")))
    }
}

fn sha1_hex(text: &str) -> String {
    Sha1::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

impl EmbeddingProvider for StoredEmbeddingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn token_embedding(&self, token: &str, _sentence: &str) -> Result<Tensor> {
        self.lookup(Self::token_key(token), token)
    }

    fn sentence_embedding(&self, sentence: &str) -> Result<Tensor> {
        self.lookup(Self::sentence_key(sentence), sentence)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn hash_vectors_are_deterministic_and_unit_norm() {
        let p = HashEmbeddingProvider::new(42);
        let a = p.token_embedding("好", "你好").unwrap();
        let b = p.token_embedding("好", "好的").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[768]);
        let norm = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_ne!(a, p.sentence_embedding("好").unwrap());
        assert_ne!(a, HashEmbeddingProvider::new(43).token_embedding("好", "").unwrap());
    }

    #[test]
    fn thousand_tokens_do_not_collide() {
        let p = HashEmbeddingProvider::with_dim(1, 16);
        let mut seen = HashSet::new();
        for i in 0..1000u32 {
            let c = char::from_u32(0x4E00 + i).unwrap().to_string();
            let v = p.token_embedding(&c, "").unwrap();
            assert!(seen.insert(v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()));
        }
    }

    #[test]
    fn stored_lookup_by_sha1_key() {
        assert_eq!(
            StoredEmbeddingProvider::token_key("abc"),
            "tok:a9993e364706816aba3e25717850c26c9cd0d89d"
        );
        let mut table = NamedTensors::new();
        table.insert(StoredEmbeddingProvider::token_key("你"), Tensor::ones(&[4]));
        table.insert(StoredEmbeddingProvider::sentence_key("你。"), Tensor::zeros(&[4]));
        let p = StoredEmbeddingProvider::new(table).unwrap();
        assert_eq!(p.dim(), 4);
        assert_eq!(p.token_embedding("你", "x").unwrap(), Tensor::ones(&[4]));
        assert_eq!(p.sentence_embedding("你。").unwrap(), Tensor::zeros(&[4]));
        assert!(matches!(p.token_embedding("我", ""), Err(Error::Input(_))));
    }

    #[test]
    fn stored_rejects_mixed_widths() {
        let mut table = NamedTensors::new();
        table.insert("tok:a", Tensor::ones(&[4]));
        table.insert("tok:b", Tensor::ones(&[5]));
        assert!(matches!(StoredEmbeddingProvider::new(table), Err(Error::Format(_))));
    }
}
