//! Weight initialization.

use ndarray::{Array, Dimension, ShapeBuilder};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// He-style standard deviation for layers feeding a GELU.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Normal(0, std) tensor drawn from `rng` in row-major order.
pub fn normal_array<D, Sh>(rng: &mut impl Rng, shape: Sh, std: f64) -> Array<f64, D>
where
    D: Dimension,
    Sh: ShapeBuilder<Dim = D>,
{
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    Array::from_shape_simple_fn(shape, || dist.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Ix2;
    use rand::SeedableRng;

    #[test]
    fn deterministic_given_seed() {
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Array<f64, Ix2> = normal_array(&mut a, (4, 5), 0.1);
        let y: Array<f64, Ix2> = normal_array(&mut b, (4, 5), 0.1);
        assert_eq!(x, y);
    }

    #[test]
    fn spread_tracks_requested_std() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x: Array<f64, Ix2> = normal_array(&mut rng, (100, 100), 0.5);
        let var = x.iter().map(|v| v * v).sum::<f64>() / 10_000.0;
        assert!(
            (var.sqrt() - 0.5).abs() < 0.02,
            "sampled std {}",
            var.sqrt()
        );
    }
}
