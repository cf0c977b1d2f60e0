//! Deterministic hashed-feature sentence encoder.
//!
//! Each normalized word of the input is hashed to a seed for a Gaussian
//! feature vector; the features are summed and the sum is scaled to unit
//! length.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Lowercased words with leading/trailing punctuation removed.
pub fn normalized_words(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

fn feature(tag: &str, text: &str, seed: u64, dim: usize, out: &mut [f64]) {
    let h = fnv1a(text.as_bytes(), fnv1a(tag.as_bytes(), FNV_OFFSET ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    for v in out.iter_mut().take(dim) {
        let x: f64 = StandardNormal.sample(&mut rng);
        *v += x;
    }
}

/// Encodes `s` into a unit-norm vector of length `dim`.
pub fn encode_text(s: &str, seed: u64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::Invalid("encoder dimension must be positive".into()));
    }
    let words = normalized_words(s);
    if words.is_empty() {
        return Err(Error::Invalid(format!("cannot encode empty text {s:?}")));
    }
    let mut v = vec![0.0; dim];
    for w in &words {
        feature("w", w, seed, dim, &mut v);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::NonFinite("encode_text"));
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

/// Encoder configuration shared by the KB store and the backbone lexicon.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl TextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn encode(&self, s: &str) -> Result<Vec<f64>> {
        encode_text(s, self.seed, self.dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_bitwise() {
        let a = encode_text("a b", 11, 32).unwrap();
        let b = encode_text("a b", 11, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unit_norm() {
        for s in ["x", "the capital-of of Paris", "The ID of the knowledge 'the r of s is o'"] {
            let v = encode_text(s, 3, 32).unwrap();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(encode_text("", 0, 8).is_err());
        assert!(encode_text("  ' ", 0, 8).is_err());
    }

    #[test]
    fn seed_changes_the_embedding() {
        assert_ne!(encode_text("paris", 1, 16).unwrap(), encode_text("paris", 2, 16).unwrap());
    }

    #[test]
    fn punctuation_and_case_are_normalized() {
        assert_eq!(normalized_words("'The Cat' is"), vec!["the", "cat", "is"]);
        assert_eq!(encode_text("'Paris'", 5, 16).unwrap(), encode_text("paris", 5, 16).unwrap());
    }
}
