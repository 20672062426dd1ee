//! Weight initialization.

use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// He-normal initialization: zero-mean Gaussian with std `sqrt(2 / fan_in)`.
///
/// Draws are made in f64 and narrowed, so the same seed produces the same
/// weight stream across precisions (up to rounding).
pub fn he_normal<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(sample_standard_normal(rng) * std))
}

/// Box-Muller transform over the ChaCha stream; two uniforms per draw keeps
/// the stream consumption independent of any rejection step.
fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn moments_match_he_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = he_normal(vec![200, 50], 50, &mut rng);
        let n = t.len() as f64;
        let mean: f64 = t.data().iter().sum::<f64>() / n;
        let var: f64 = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let target = 2.0 / 50.0;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - target).abs() < 0.1 * target, "var {var} target {target}");
    }

    #[test]
    fn deterministic_given_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a: Tensor<f64> = he_normal(vec![32], 8, &mut r1);
        let b: Tensor<f64> = he_normal(vec![32], 8, &mut r2);
        assert_eq!(a.data(), b.data());
    }
}
