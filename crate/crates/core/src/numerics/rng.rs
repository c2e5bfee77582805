//! Seeded randomness. All streams are ChaCha8 (`rand_chacha`) seeded from a
//! `u64`; Gaussian draws use `rand_distr::StandardNormal`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::{Real, Tensor};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a named sub-task.
pub fn fork(seed: u64, label: &str) -> SeededRng {
    seeded(seed ^ fnv1a(label.as_bytes()).rotate_left(17))
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn normal<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("numel")
}

/// Kaiming-style normal init for a weight whose rows have `fan_in` inputs.
pub fn kaiming<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    normal(rng, shape, (1.0 / fan_in.max(1) as f64).sqrt())
}

pub fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}
