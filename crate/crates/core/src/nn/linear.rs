//! Fully connected layer.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::nn::{init, Params};

/// `y = x·Wᵀ + b` over batched row vectors. Weight shape is
/// `[out_dim, in_dim]`; bias starts at zero.
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub grad_weight: Array2<f64>,
    pub grad_bias: Array1<f64>,
    cache_input: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: init::normal_array(rng, (out_dim, in_dim), init::he_std(in_dim)),
            bias: Array1::zeros(out_dim),
            grad_weight: Array2::zeros((out_dim, in_dim)),
            grad_bias: Array1::zeros(out_dim),
            cache_input: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Forward pass caching the input for `backward`.
    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let y = self.forward_eval(x);
        self.cache_input = Some(x.clone());
        y
    }

    /// Forward pass without caching (inference / oracles).
    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(
            x.ncols(),
            self.in_dim(),
            "linear input width {} vs weight in_dim {}",
            x.ncols(),
            self.in_dim()
        );
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Accumulates weight/bias gradients, returns the input gradient.
    pub fn backward(&mut self, gy: &Array2<f64>) -> Array2<f64> {
        let x = self
            .cache_input
            .take()
            .expect("Linear::backward called without cached forward");
        self.grad_weight += &gy.t().dot(&x);
        self.grad_bias += &gy.sum_axis(Axis(0));
        gy.dot(&self.weight)
    }
}

impl Params for Linear {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        f(
            "weight",
            self.weight.as_slice_mut().unwrap(),
            self.grad_weight.as_slice_mut().unwrap(),
        );
        f(
            "bias",
            self.bias.as_slice_mut().unwrap(),
            self.grad_bias.as_slice_mut().unwrap(),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_return_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = Linear::new(3, 2, &mut rng);
        layer.weight.fill(0.0);
        layer.bias[0] = 1.5;
        layer.bias[1] = -0.5;
        let x = Array::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        let y = layer.forward_eval(&x);
        for r in 0..2 {
            assert_eq!(y[[r, 0]], 1.5);
            assert_eq!(y[[r, 1]], -0.5);
        }
    }

    #[test]
    fn matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = Linear::new(4, 3, &mut rng);
        let x: Array2<f64> = crate::nn::init::normal_array(&mut rng, (2, 4), 1.0);
        let y = layer.forward_eval(&x);
        for n in 0..2 {
            for o in 0..3 {
                let mut acc = layer.bias[o];
                for i in 0..4 {
                    acc += x[[n, i]] * layer.weight[[o, i]];
                }
                assert!((y[[n, o]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = Linear::new(3, 2, &mut rng);
        let x: Array2<f64> = crate::nn::init::normal_array(&mut rng, (4, 3), 1.0);
        // Scalar loss: sum of squared outputs.
        let y = layer.forward(&x);
        layer.zero_grad();
        let gy = y.mapv(|v| 2.0 * v);
        let gx = layer.backward(&gy);

        // Input gradient.
        let mut flat: Vec<f64> = x.iter().copied().collect();
        let w = layer.weight.clone();
        let b = layer.bias.clone();
        let num = gradcheck::central_diff(&mut flat, 1e-5, &mut |p| {
            let xp = Array2::from_shape_vec((4, 3), p.to_vec()).unwrap();
            let yp = xp.dot(&w.t()) + &b;
            yp.iter().map(|v| v * v).sum()
        });
        let ana: Vec<f64> = gx.iter().copied().collect();
        gradcheck::compare_grads(&ana, &num, 1e-5, 1e-9).unwrap();

        // Weight gradient.
        let mut wflat: Vec<f64> = layer.weight.iter().copied().collect();
        let numw = gradcheck::central_diff(&mut wflat, 1e-5, &mut |p| {
            let wp = Array2::from_shape_vec((2, 3), p.to_vec()).unwrap();
            let yp = x.dot(&wp.t()) + &b;
            yp.iter().map(|v| v * v).sum()
        });
        let anaw: Vec<f64> = layer.grad_weight.iter().copied().collect();
        gradcheck::compare_grads(&anaw, &numw, 1e-5, 1e-9).unwrap();
    }
}
