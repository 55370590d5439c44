use ndarray::Array1;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Result, SugarError};

/// Maps text to a unit vector of a fixed dimension.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Array1<f64>>;
}

/// Deterministic stand-in for a pretrained text encoder: each whitespace
/// token maps to a pseudo-random Gaussian vector keyed by (token, seed), and
/// a sentence embeds as the L2-normalized mean of its token vectors. Token
/// order therefore does not matter.
#[derive(Debug, Clone)]
pub struct HashedTextEncoder {
    dim: usize,
    seed: u64,
}

impl HashedTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    /// The raw (unnormalized) Gaussian vector of one token.
    pub fn token_vector(&self, token: &str) -> Array1<f64> {
        let mut hasher = Sha256::new();
        hasher.update(b"token-embed");
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut rng =
            ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()));
        Array1::from_shape_fn(self.dim, |_| {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
    }
}

impl TextEncoder for HashedTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Array1<f64>> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(SugarError::Encoding(format!(
                "cannot encode empty text {text:?}"
            )));
        }
        let mut sum = Array1::<f64>::zeros(self.dim);
        for token in &tokens {
            sum += &self.token_vector(token);
        }
        sum /= tokens.len() as f64;
        let norm = sum.dot(&sum).sqrt();
        if norm < 1e-12 {
            return Err(SugarError::Encoding(format!(
                "degenerate embedding for text {text:?}"
            )));
        }
        Ok(sum / norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_normalized() {
        let enc = HashedTextEncoder::new(64, 11);
        let a = enc.encode("the hand rises").unwrap();
        let b = enc.encode("the hand rises").unwrap();
        assert_eq!(a, b);
        assert!((a.dot(&a).sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn token_order_does_not_matter() {
        let enc = HashedTextEncoder::new(64, 11);
        let a = enc.encode("hand the rises").unwrap();
        let b = enc.encode("the hand rises").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_text_is_encoding_error() {
        let enc = HashedTextEncoder::new(64, 11);
        assert!(matches!(enc.encode("   "), Err(SugarError::Encoding(_))));
    }

    #[test]
    fn disjoint_vocabulary_sentences_have_small_cosine() {
        // Empirical bound over 1000 seeded pairs of disjoint-vocabulary
        // sentences at d=256.
        let enc = HashedTextEncoder::new(256, 5);
        let mut max_abs = 0.0f64;
        for trial in 0..1000 {
            let left = format!("alpha{trial} beta{trial} gamma{trial} delta{trial}");
            let right = format!("omega{trial} sigma{trial} kappa{trial} theta{trial}");
            let a = enc.encode(&left).unwrap();
            let b = enc.encode(&right).unwrap();
            max_abs = max_abs.max(a.dot(&b).abs());
        }
        assert!(max_abs < 0.25, "max |cosine| over 1000 trials: {max_abs}");
    }
}
