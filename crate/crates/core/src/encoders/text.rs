//! Pluggable text embeddings: a deterministic hashed bag-of-words provider
//! for dataset-free runs, or precomputed external-encoder vectors loaded
//! from an embedding file.
//!
//! Embedding file layout (little-endian): magic `SGEM`, dimension u32,
//! count u32, then records (node id u64, modality code u8, f32 vector).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::RngExt;
use thiserror::Error;

use crate::numerics::seeded_rng;
use crate::scenegraph::ModalityKind;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"SGEM";
pub const TOY_HASH_DIM: usize = 384;
pub const TOY_HASH_BUCKETS: u64 = 4096;
/// Fixed default so training and later inference hash text identically.
pub const TOY_HASH_DEFAULT_SEED: u64 = 0x5347_5050;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected SGEM")]
    BadMagic,
    #[error("malformed embedding file: {0}")]
    Malformed(String),
    #[error("no precomputed {modality:?} embedding for node {node}")]
    MissingEntry { node: u64, modality: ModalityKind },
    #[error("embedding dimension mismatch: file has {file}, expected {expected}")]
    DimensionMismatch { file: usize, expected: usize },
}

/// Source of caption/referral vectors. All emitted vectors share `dim()`.
pub enum TextEmbeddingProvider {
    /// Hashed bag-of-words into a fixed random projection.
    ToyHash { dim: usize, seed: u64 },
    /// Vectors produced by an external encoder, keyed by node id.
    Precomputed {
        dim: usize,
        captions: BTreeMap<u64, Vec<f32>>,
        referrals: BTreeMap<u64, Vec<Vec<f32>>>,
    },
}

impl TextEmbeddingProvider {
    pub fn toy_default() -> Self {
        TextEmbeddingProvider::ToyHash {
            dim: TOY_HASH_DIM,
            seed: TOY_HASH_DEFAULT_SEED,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TextEmbeddingProvider::ToyHash { dim, .. } => *dim,
            TextEmbeddingProvider::Precomputed { dim, .. } => *dim,
        }
    }

    /// Vector for one caption.
    pub fn caption_vec(&self, node_id: u64, caption: &str) -> Result<Vec<f32>, TextError> {
        match self {
            TextEmbeddingProvider::ToyHash { dim, seed } => Ok(hash_embed(caption, *dim, *seed)),
            TextEmbeddingProvider::Precomputed { captions, .. } => captions
                .get(&node_id)
                .cloned()
                .ok_or(TextError::MissingEntry {
                    node: node_id,
                    modality: ModalityKind::Caption,
                }),
        }
    }

    /// One vector per referral phrase.
    pub fn referral_vecs(
        &self,
        node_id: u64,
        referrals: &[String],
    ) -> Result<Vec<Vec<f32>>, TextError> {
        match self {
            TextEmbeddingProvider::ToyHash { dim, seed } => Ok(referrals
                .iter()
                .map(|r| hash_embed(r, *dim, *seed))
                .collect()),
            TextEmbeddingProvider::Precomputed { referrals: map, .. } => map
                .get(&node_id)
                .cloned()
                .ok_or(TextError::MissingEntry {
                    node: node_id,
                    modality: ModalityKind::Referral,
                }),
        }
    }
}

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

/// Per-bucket projection row: a deterministic pseudo-Gaussian vector.
fn bucket_row(bucket: u64, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = seeded_rng(seed, bucket.wrapping_add(0x1000));
    (0..dim)
        .map(|_| {
            // Box-Muller from two uniforms
            let u1: f32 = rng.random_range(1e-7f32..1.0);
            let u2: f32 = rng.random_range(0.0f32..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
        })
        .collect()
}

/// Lowercased alphanumeric words, hashed into buckets, averaged through the
/// fixed projection, L2-normalized. Same string, same vector, always.
pub fn hash_embed(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    let mut acc = vec![0.0f32; dim];
    let mut words = 0usize;
    for word in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
    {
        let lower = word.to_lowercase();
        let bucket = fnv1a(lower.as_bytes(), seed) % TOY_HASH_BUCKETS;
        let row = bucket_row(bucket, dim, seed);
        for (a, r) in acc.iter_mut().zip(&row) {
            *a += r;
        }
        words += 1;
    }
    if words == 0 {
        return acc;
    }
    for a in acc.iter_mut() {
        *a /= words as f32;
    }
    let norm = acc.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm > 0.0 {
        for a in acc.iter_mut() {
            *a /= norm;
        }
    }
    acc
}

/// Arithmetic mean of referral vectors; `None` when the list is empty.
pub fn mean_referral_vec(vecs: &[Vec<f32>]) -> Option<Vec<f32>> {
    if vecs.is_empty() {
        return None;
    }
    let dim = vecs[0].len();
    let mut acc = vec![0.0f32; dim];
    for v in vecs {
        assert_eq!(v.len(), dim, "referral vectors must share one dimension");
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    for a in acc.iter_mut() {
        *a /= vecs.len() as f32;
    }
    Some(acc)
}

pub fn save_embeddings(
    path: &Path,
    dim: usize,
    records: &[(u64, ModalityKind, Vec<f32>)],
) -> Result<(), TextError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (node, modality, vec) in records {
        if vec.len() != dim {
            return Err(TextError::DimensionMismatch {
                file: vec.len(),
                expected: dim,
            });
        }
        w.write_all(&node.to_le_bytes())?;
        w.write_all(&[modality.code()])?;
        for v in vec {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load an embedding file into a precomputed provider. Multiple referral
/// records per node accumulate in order.
pub fn load_embeddings(path: &Path) -> Result<TextEmbeddingProvider, TextError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EMBEDDING_MAGIC {
        return Err(TextError::BadMagic);
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let dim = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4)?;
    let count = u32::from_le_bytes(buf4) as usize;

    let mut captions = BTreeMap::new();
    let mut referrals: BTreeMap<u64, Vec<Vec<f32>>> = BTreeMap::new();
    for _ in 0..count {
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let node = u64::from_le_bytes(buf8);
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let modality = ModalityKind::from_code(code[0])
            .ok_or_else(|| TextError::Malformed(format!("unknown modality code {}", code[0])))?;
        let mut vec = vec![0.0f32; dim];
        for v in vec.iter_mut() {
            r.read_exact(&mut buf4)?;
            *v = f32::from_le_bytes(buf4);
        }
        match modality {
            ModalityKind::Caption => {
                captions.insert(node, vec);
            }
            ModalityKind::Referral => referrals.entry(node).or_default().push(vec),
            other => {
                return Err(TextError::Malformed(format!(
                    "embedding file carries non-text modality {other:?}"
                )))
            }
        }
    }
    Ok(TextEmbeddingProvider::Precomputed {
        dim,
        captions,
        referrals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_hash_is_deterministic() {
        let a = hash_embed("the red box is wooden", TOY_HASH_DIM, 1);
        let b = hash_embed("the red box is wooden", TOY_HASH_DIM, 1);
        assert_eq!(a, b);
        let c = hash_embed("the blue box is wooden", TOY_HASH_DIM, 1);
        assert_ne!(a, c);
        let d = hash_embed("the red box is wooden", TOY_HASH_DIM, 2);
        assert_ne!(a, d);
    }

    #[test]
    fn toy_hash_output_is_unit_norm() {
        let v = hash_embed("a cylinder near the sphere", TOY_HASH_DIM, 0);
        let n: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn single_referral_mean_is_the_vector() {
        let v = vec![vec![1.0, 2.0, 3.0]];
        assert_eq!(mean_referral_vec(&v).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn opposite_referrals_cancel_to_zero() {
        let u = vec![0.6f32, -0.8, 0.0];
        let neg: Vec<f32> = u.iter().map(|x| -x).collect();
        let mean = mean_referral_vec(&[u, neg]).unwrap();
        assert_eq!(mean, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_referrals_yield_none() {
        assert!(mean_referral_vec(&[]).is_none());
    }

    #[test]
    fn embedding_file_round_trip_and_missing_entry() {
        let dir = std::env::temp_dir().join("sgalign_sgem_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.sgem");
        let records = vec![
            (0u64, ModalityKind::Caption, vec![1.0f32, 0.0, 0.0]),
            (0u64, ModalityKind::Referral, vec![0.0f32, 1.0, 0.0]),
            (0u64, ModalityKind::Referral, vec![0.0f32, 0.0, 1.0]),
            (3u64, ModalityKind::Caption, vec![0.5f32, 0.5, 0.0]),
        ];
        save_embeddings(&path, 3, &records).unwrap();
        let provider = load_embeddings(&path).unwrap();
        assert_eq!(provider.dim(), 3);
        assert_eq!(provider.caption_vec(0, "ignored").unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(provider.referral_vecs(0, &[]).unwrap().len(), 2);
        let err = provider.caption_vec(7, "x").unwrap_err();
        assert!(matches!(err, TextError::MissingEntry { node: 7, .. }));
        std::fs::remove_file(&path).unwrap();
    }
}
