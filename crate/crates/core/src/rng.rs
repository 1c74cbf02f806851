//! Seed derivation. Every random stream is keyed by an explicit base seed and
//! a path of tags, so results never depend on draw order across streams.

use omnivore_tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type SeedRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

/// Stable 64-bit tag for a string key.
pub fn str_tag(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn rng_for(base: u64, tags: &[u64]) -> SeedRng {
    SeedRng::seed_from_u64(derive_seed(base, tags))
}

/// Normal(0, std) truncated to ±2 std by resampling.
pub fn trunc_normal<T: Real>(shape: &[usize], std: f64, rng: &mut SeedRng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            break T::from_f64_lossy(z * std);
        }
    })
}

pub fn ones<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::one())
}
