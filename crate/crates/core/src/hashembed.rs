//! Vocabulary-free token embeddings.
//!
//! Each lowercase token is hashed together with a seed and a salt; the hash
//! seeds a generator that draws the token's vector. Any string therefore has
//! an embedding, and the same `(seed, salt, token)` always yields the same
//! vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Splits on whitespace, lowercases and trims surrounding punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64-bit hash of `(seed, salt, token)`.
pub fn token_hash(seed: u64, salt: &str, token: &str) -> u64 {
    let h = fnv1a(salt.as_bytes(), 0xcbf2_9ce4_8422_2325);
    let h = fnv1a(&[0xff], h);
    let h = fnv1a(token.as_bytes(), h);
    splitmix(h ^ splitmix(seed))
}

/// Gaussian vector with entries of variance `1 / dim` for one token.
pub fn token_vector(seed: u64, salt: &str, token: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(token_hash(seed, salt, token));
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim).map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect()
}

/// Mean of the token vectors of `text`, or `None` when it has no tokens.
pub fn pooled_vector(seed: u64, salt: &str, text: &str, dim: usize) -> Option<Vec<f64>> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return None;
    }
    let mut acc = vec![0.0; dim];
    for t in &tokens {
        for (a, v) in acc.iter_mut().zip(token_vector(seed, salt, t, dim)) {
            *a += v;
        }
    }
    let n = tokens.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Some(acc)
}

pub fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_normalizes_case_and_punctuation() {
        assert_eq!(tokenize("  Dog, BARKING!  "), vec!["dog", "barking"]);
        assert!(tokenize(" ... ").is_empty());
    }

    #[test]
    fn vectors_depend_on_every_key_part() {
        let a = token_vector(1, "type", "dog", 8);
        assert_eq!(a, token_vector(1, "type", "dog", 8));
        assert_ne!(a, token_vector(2, "type", "dog", 8));
        assert_ne!(a, token_vector(1, "text", "dog", 8));
        assert_ne!(a, token_vector(1, "type", "cat", 8));
    }

    #[test]
    fn pooling_ignores_order() {
        let a = pooled_vector(3, "type", "dog barking", 16).unwrap();
        let b = pooled_vector(3, "type", "barking dog", 16).unwrap();
        assert_eq!(a, b);
    }
}
