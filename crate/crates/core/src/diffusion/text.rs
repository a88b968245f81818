use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{normal_matrix, rng_for, stable_hash64, Stream};

use super::BackboneSpec;

/// Frozen toy text encoder: hashed word embeddings plus a sinusoidal
/// position code, padded or truncated to `n_text` tokens.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    n_text: usize,
    d_ctx: usize,
    seed: u64,
    pad: Array2<f64>,
}

impl TextEncoder {
    pub fn new(n_text: usize, d_ctx: usize, seed: u64) -> Self {
        let pad = normal_matrix(&mut rng_for(seed, Stream::TextEncoder, 0), 1, d_ctx, 0.5);
        Self {
            n_text,
            d_ctx,
            seed,
            pad,
        }
    }

    pub fn for_spec(spec: &BackboneSpec) -> Self {
        Self::new(spec.n_text, spec.d_ctx, spec.weight_seed)
    }

    pub fn tokenize(prompt: &str) -> Vec<String> {
        prompt
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    fn word_vector(&self, word: &str) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash64(word));
        normal_matrix(&mut rng, 1, self.d_ctx, 1.0)
    }

    /// `[n_text × d_ctx]` embedding of `prompt`.
    pub fn encode(&self, prompt: &str) -> Array2<f64> {
        let words = Self::tokenize(prompt);
        let mut out = Array2::<f64>::zeros((self.n_text, self.d_ctx));
        for pos in 0..self.n_text {
            let base = match words.get(pos) {
                Some(w) => self.word_vector(w),
                None => self.pad.clone(),
            };
            let mut row = out.row_mut(pos);
            row.assign(&base.row(0));
            for j in 0..self.d_ctx {
                let freq = 1.0 / 10_000f64.powf((j / 2 * 2) as f64 / self.d_ctx as f64);
                let angle = pos as f64 * freq;
                row[j] += 0.1 * if j % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
        out
    }

    /// Embedding of the empty prompt.
    pub fn null_embedding(&self) -> Array2<f64> {
        self.encode("")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_is_deterministic_and_prompt_sensitive() {
        let enc = TextEncoder::for_spec(&BackboneSpec::ci());
        let a = enc.encode("A woman smiling, outdoors");
        assert_eq!(a, enc.encode("a WOMAN smiling outdoors"));
        assert_ne!(a, enc.encode("a man running"));
        assert_eq!(a.dim(), (8, 16));
        assert_ne!(enc.null_embedding(), a);
    }
}
