//! Seeded random streams. Every consumer derives its generator from a seed
//! and a fixed stream id, so stages never share or perturb each other's
//! randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a seed with a label so nested loops get unrelated seeds.
pub fn derive(seed: u64, label: u64) -> u64 {
    use rand::RngCore;
    stream(seed, label.wrapping_add(0x9e37_79b9_7f4a_7c15)).next_u64()
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
