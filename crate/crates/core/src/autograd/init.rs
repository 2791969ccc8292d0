use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};

/// Half-width `sqrt(6 / fan_in)` of the Kaiming uniform distribution.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    assert!(fan_in > 0, "fan_in must be positive");
    (6.0 / fan_in as f64).sqrt()
}

/// Samples `U(-b, b)` with `b = sqrt(6 / fan_in)` from a seeded generator.
pub fn kaiming_uniform_init<S: Scalar>(shape: &[usize], fan_in: usize, seed: u64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kaiming_uniform_with(&mut rng, shape, fan_in)
}

pub fn kaiming_uniform_with<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let b = kaiming_bound(fan_in);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64(rng.gen_range(-b..=b))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches length")
}
