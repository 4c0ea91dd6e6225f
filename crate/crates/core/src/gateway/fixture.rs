use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Embedder, Embedding, GatewayError};
use crate::kb::normalize_text;

/// Deterministic unit vector derived from `(seed, text)`.
pub fn hashed_unit_vector(text: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(text.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FixtureFile {
    dim: usize,
    seed: u64,
    vectors: HashMap<String, Vec<f64>>,
}

/// Table-driven embedder: normalized text → vector, with a seeded
/// hash-derived unit vector for unseen text.
#[derive(Debug, Clone)]
pub struct FixtureEmbedder {
    dim: usize,
    seed: u64,
    vectors: HashMap<String, Embedding>,
}

impl FixtureEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            seed,
            vectors: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, text: &str, vector: Vec<f64>) -> Result<(), GatewayError> {
        if vector.len() != self.dim {
            return Err(GatewayError::DimensionMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        self.vectors
            .insert(normalize_text(text), Embedding::new(vector)?);
        Ok(())
    }

    /// Maps every text in `texts` to the same vector.
    pub fn insert_group<'a>(
        &mut self,
        texts: impl IntoIterator<Item = &'a str>,
        vector: Vec<f64>,
    ) -> Result<(), GatewayError> {
        for t in texts {
            self.insert(t, vector.clone())?;
        }
        Ok(())
    }

    pub fn lookup(&self, text: &str) -> Embedding {
        let key = normalize_text(text);
        match self.vectors.get(&key) {
            Some(v) => v.clone(),
            None => Embedding(hashed_unit_vector(&key, self.seed, self.dim)),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        let file: FixtureFile =
            serde_json::from_str(text).map_err(|e| GatewayError::Script(e.to_string()))?;
        if file.dim == 0 {
            return Err(GatewayError::Script("dim must be positive".into()));
        }
        let mut out = Self::new(file.dim, file.seed);
        for (t, v) in file.vectors {
            out.insert(&t, v)?;
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path).map_err(|e| GatewayError::Script(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file = FixtureFile {
            dim: self.dim,
            seed: self.seed,
            vectors: self
                .vectors
                .iter()
                .map(|(k, v)| (k.clone(), v.values().to_vec()))
                .collect(),
        };
        serde_json::to_string(&file).expect("fixture serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GatewayError> {
        fs::write(path, self.to_json()).map_err(|e| GatewayError::Script(e.to_string()))
    }
}

impl Embedder for FixtureEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("no texts to embed".into()));
        }
        Ok(texts.iter().map(|t| self.lookup(t)).collect())
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }
}

/// Maps every input to one vector; every pair is maximally similar.
#[derive(Debug, Clone)]
pub struct ConstantEmbedder {
    vector: Embedding,
}

impl ConstantEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            vector: Embedding(vec![1.0; dim.max(1)]),
        }
    }
}

impl Embedder for ConstantEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("no texts to embed".into()));
        }
        Ok(vec![self.vector.clone(); texts.len()])
    }

    fn dim(&self) -> Option<usize> {
        Some(self.vector.dim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirrored_pairs_share_vectors() {
        let mut f = FixtureEmbedder::new(4, 1);
        f.insert_group(["X_en", "X_es"], vec![1.0, 2.0, 0.0, 0.0])
            .unwrap();
        let v = f.embed(&["X_en", "x_es", "unseen"]).unwrap();
        assert_eq!(v[0], v[1]);
        assert_ne!(v[0], v[2]);
    }

    #[test]
    fn unseen_text_is_deterministic_unit_vector() {
        let f = FixtureEmbedder::new(16, 42);
        let a = f.embed(&["hello world"]).unwrap();
        let b = f.embed(&["  Hello   world. "]).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a[0].values().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        let other_seed = FixtureEmbedder::new(16, 43).embed(&["hello world"]).unwrap();
        assert_ne!(a, other_seed);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(FixtureEmbedder::new(2, 0).embed(&[]).is_err());
        assert!(ConstantEmbedder::new(2).embed(&[]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut f = FixtureEmbedder::new(3, 9);
        f.insert("A?", vec![1.0, 0.0, 0.0]).unwrap();
        let g = FixtureEmbedder::from_json(&f.to_json()).unwrap();
        assert_eq!(g.lookup("a"), f.lookup("a"));
        assert_eq!(g.lookup("zzz"), f.lookup("zzz"));
        assert!(f.insert("b", vec![1.0]).is_err());
    }
}
