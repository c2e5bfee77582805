use crate::numerics::rng;
use crate::numerics::Tensor;

use super::vocab::normalize_words;

/// Frozen text-side embedding: each word maps to a fixed pseudo-random unit
/// vector derived from `(seed, word)`. The `[CLS]` vector of a text is the
/// normalized mean of its word vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextEncoder {
    pub dim: usize,
    pub seed: u64,
}

/// Word vectors of one AD and its `[CLS]` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedText {
    pub cls: Tensor<f32>,
    pub words: Tensor<f32>,
}

pub const DEFAULT_TEXT_SEED: u64 = 0x7e57_5eed;

impl TextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn embed_word(&self, word: &str) -> Vec<f32> {
        let mut r = rng::seeded(self.seed ^ rng::fnv1a(word.as_bytes()));
        let v: Vec<f64> = (0..self.dim).map(|_| rng::gaussian(&mut r)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| (x / n) as f32).collect()
    }

    /// `None` when the text has no words.
    pub fn encode(&self, text: &str) -> Option<EncodedText> {
        let words = normalize_words(text);
        if words.is_empty() {
            return None;
        }
        let rows: Vec<Vec<f32>> = words.iter().map(|w| self.embed_word(w)).collect();
        let mut mean = vec![0.0f64; self.dim];
        for r in &rows {
            for (m, &x) in mean.iter_mut().zip(r) {
                *m += x as f64;
            }
        }
        let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let cls = mean.iter().map(|x| (x / n) as f32).collect();
        Some(EncodedText {
            cls: Tensor::vector(cls),
            words: Tensor::from_rows(&rows).expect("equal widths"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_deterministic_unit_vectors() {
        let enc = TextEncoder::new(16, 3);
        let a = enc.embed_word("door");
        assert_eq!(a, enc.embed_word("door"));
        assert_ne!(a, enc.embed_word("window"));
        let n: f32 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
        let e = enc.encode("Jack opens the door").unwrap();
        assert_eq!(e.words.shape(), &[4, 16]);
        assert_eq!(e.words.row(3), a.as_slice());
        assert!(enc.encode(" .. ").is_none());
    }
}
