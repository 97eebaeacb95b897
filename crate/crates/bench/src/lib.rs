//! Shared fixtures for the benchmarks in `benches/`.

use moex::{Shape4, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Standard-normal tensor, fixed by `seed`.
pub fn normal_tensor(shape: Shape4, seed: u64) -> Tensor4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(shape, |_, _, _, _| StandardNormal.sample(&mut rng))
}

/// Uniform permutation of `0..n`, fixed by `seed`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    moex::moex::sample_permutation(&mut ChaCha8Rng::seed_from_u64(seed), n)
}
