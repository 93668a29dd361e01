//! Counter-keyed random streams.
//!
//! Every random draw in the toolkit comes from a ChaCha stream whose seed is a
//! hash of a small key tuple (global seed, a stream label, counters). Two runs
//! with the same keys see the same numbers regardless of call order elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key tuple into one 64-bit seed.
pub fn mix(keys: &[u64]) -> u64 {
    keys.iter().fold(0x5EED_u64, |acc, &k| splitmix(acc ^ splitmix(k)))
}

/// Stable 64-bit hash of a label, for use as a stream key.
pub fn label(s: &str) -> u64 {
    // FNV-1a
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn stream(keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(keys))
}

/// Gaussian tensor with mean 0 drawn from the stream keyed by `keys`.
pub fn gaussian(shape: impl Into<Vec<usize>>, std: f64, keys: &[u64]) -> Tensor {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let mut rng = stream(keys);
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}
