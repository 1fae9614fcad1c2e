//! Batch normalization over `[N, C, H, W]` tensors.
//!
//! Training mode normalizes with statistics of the current batch, which
//! at batch size 1 degenerates to per-instance normalization (statistics
//! over that sample's H×W plane), the intended fallback. Eval mode uses
//! the frozen running statistics, so inference is deterministic and
//! batch-size independent. Running variance stores the biased (1/m)
//! batch variance; the same convention is used on both sides.

use ndarray::{Array1, Array4};

use crate::nn::conv::dims4;
use crate::nn::Params;

pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub grad_gamma: Array1<f64>,
    pub grad_beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<Cache>,
}

struct Cache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    training: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Training forward: batch statistics, running stats updated.
    pub fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = dims4(x);
        assert_eq!(c, self.channels(), "batchnorm channel count");
        let hw = h * w;
        let m = (n * hw) as f64;
        let xs = x.as_slice().unwrap();

        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                let plane = &xs[(ni * c + ci) * hw..][..hw];
                s += plane.iter().sum::<f64>();
            }
            let mu = s / m;
            let mut v = 0.0;
            for ni in 0..n {
                let plane = &xs[(ni * c + ci) * hw..][..hw];
                v += plane.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
            }
            mean[ci] = mu;
            var[ci] = v / m;
        }

        for ci in 0..c {
            self.running_mean[ci] =
                (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean[ci];
            self.running_var[ci] =
                (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var[ci];
        }

        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut y = Array4::zeros((n, c, h, w));
        {
            let xh = xhat.as_slice_mut().unwrap();
            let ys = y.as_slice_mut().unwrap();
            for ci in 0..c {
                let (mu, is, g, b) = (mean[ci], inv_std[ci], self.gamma[ci], self.beta[ci]);
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    let src = &xs[base..base + hw];
                    let dxh = &mut xh[base..base + hw];
                    let dy = &mut ys[base..base + hw];
                    for i in 0..hw {
                        let v = (src[i] - mu) * is;
                        dxh[i] = v;
                        dy[i] = g * v + b;
                    }
                }
            }
        }
        self.cache = Some(Cache {
            xhat,
            inv_std,
            training: true,
        });
        y
    }

    /// Eval forward: frozen running statistics, no cache mutation.
    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = dims4(x);
        assert_eq!(c, self.channels(), "batchnorm channel count");
        let hw = h * w;
        let xs = x.as_slice().unwrap();
        let mut y = Array4::zeros((n, c, h, w));
        let ys = y.as_slice_mut().unwrap();
        for ci in 0..c {
            let is = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            let (mu, g, b) = (self.running_mean[ci], self.gamma[ci], self.beta[ci]);
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                let src = &xs[base..base + hw];
                let dst = &mut ys[base..base + hw];
                for i in 0..hw {
                    dst[i] = g * (src[i] - mu) * is + b;
                }
            }
        }
        y
    }

    /// Eval forward that also caches for a backward pass through the
    /// frozen-statistics graph (used when training must not update stats).
    pub fn forward_eval_cached(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = dims4(x);
        let y = self.forward_eval(x);
        let hw = h * w;
        let xs = x.as_slice().unwrap();
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut xhat = Array4::zeros((n, c, h, w));
        let xh = xhat.as_slice_mut().unwrap();
        for ci in 0..c {
            let (mu, is) = (self.running_mean[ci], inv_std[ci]);
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    xh[base + i] = (xs[base + i] - mu) * is;
                }
            }
        }
        self.cache = Some(Cache {
            xhat,
            inv_std,
            training: false,
        });
        y
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let cache = self
            .cache
            .take()
            .expect("BatchNorm2d::backward called without cached forward");
        let (n, c, h, w) = dims4(gy);
        let hw = h * w;
        let m = (n * hw) as f64;
        let gys = gy.as_slice().unwrap();
        let xh = cache.xhat.as_slice().unwrap();
        let mut gx = Array4::zeros((n, c, h, w));
        let gxs = gx.as_slice_mut().unwrap();

        for ci in 0..c {
            let mut sum_gy = 0.0;
            let mut sum_gy_xhat = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    sum_gy += gys[base + i];
                    sum_gy_xhat += gys[base + i] * xh[base + i];
                }
            }
            self.grad_beta[ci] += sum_gy;
            self.grad_gamma[ci] += sum_gy_xhat;

            let g = self.gamma[ci];
            let is = cache.inv_std[ci];
            if cache.training {
                // d/dx of batch-statistic normalization.
                let k = g * is / m;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for i in 0..hw {
                        gxs[base + i] =
                            k * (m * gys[base + i] - sum_gy - xh[base + i] * sum_gy_xhat);
                    }
                }
            } else {
                // Frozen statistics: a plain affine map.
                let k = g * is;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for i in 0..hw {
                        gxs[base + i] = k * gys[base + i];
                    }
                }
            }
        }
        gx
    }
}

impl Params for BatchNorm2d {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        f(
            "gamma",
            self.gamma.as_slice_mut().unwrap(),
            self.grad_gamma.as_slice_mut().unwrap(),
        );
        f(
            "beta",
            self.beta.as_slice_mut().unwrap(),
            self.grad_beta.as_slice_mut().unwrap(),
        );
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("running_mean", self.running_mean.as_slice_mut().unwrap());
        f("running_var", self.running_var.as_slice_mut().unwrap());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck, init};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn training_output_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut bn = BatchNorm2d::new(3);
        let x: Array4<f64> = init::normal_array(&mut rng, (4, 3, 5, 5), 2.0);
        let y = bn.forward_train(&x);
        for ci in 0..3 {
            let mut s = 0.0;
            let mut s2 = 0.0;
            for ni in 0..4 {
                for yi in 0..5 {
                    for xi in 0..5 {
                        s += y[[ni, ci, yi, xi]];
                        s2 += y[[ni, ci, yi, xi]] * y[[ni, ci, yi, xi]];
                    }
                }
            }
            let m = 100.0;
            assert!((s / m).abs() < 1e-10);
            assert!((s2 / m - 1.0).abs() < 1e-3); // eps shifts variance slightly
        }
    }

    #[test]
    fn batch_of_one_normalizes_per_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bn = BatchNorm2d::new(2);
        let x: Array4<f64> = init::normal_array(&mut rng, (1, 2, 6, 6), 3.0);
        let y = bn.forward_train(&x);
        for ci in 0..2 {
            let mut s = 0.0;
            for yi in 0..6 {
                for xi in 0..6 {
                    s += y[[0, ci, yi, xi]];
                }
            }
            assert!((s / 36.0).abs() < 1e-10);
        }
    }

    #[test]
    fn eval_mode_is_deterministic_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut bn = BatchNorm2d::new(2);
        // Push some statistics into the running buffers.
        let x: Array4<f64> = init::normal_array(&mut rng, (8, 2, 4, 4), 1.0);
        bn.forward_train(&x);
        let probe: Array4<f64> = init::normal_array(&mut rng, (1, 2, 4, 4), 1.0);
        let a = bn.forward_eval(&probe);
        let b = bn.forward_eval(&probe);
        assert_eq!(a, b);
        // Per-element affine map check.
        let is = 1.0 / (bn.running_var[0] + bn.eps).sqrt();
        let want = bn.gamma[0] * (probe[[0, 0, 1, 2]] - bn.running_mean[0]) * is + bn.beta[0];
        assert!((a[[0, 0, 1, 2]] - want).abs() < 1e-12);
    }

    #[test]
    fn training_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Array4<f64> = init::normal_array(&mut rng, (3, 2, 4, 4), 1.0);
        // Random linear functional as the loss: a sum-of-squares loss is
        // nearly invariant to x under normalization, leaving only noise.
        let r: Array4<f64> = init::normal_array(&mut rng, (3, 2, 4, 4), 1.0);
        let mut bn = BatchNorm2d::new(2);
        bn.gamma[0] = 1.3;
        bn.gamma[1] = 0.7;
        bn.beta[0] = 0.2;

        bn.forward_train(&x);
        bn.zero_grad();
        let gx = bn.backward(&r);

        let gamma = bn.gamma.clone();
        let beta = bn.beta.clone();
        let mut xflat: Vec<f64> = x.iter().copied().collect();
        let num = gradcheck::central_diff(&mut xflat, 1e-5, &mut |p| {
            let xp = Array4::from_shape_vec((3, 2, 4, 4), p.to_vec()).unwrap();
            // Fresh instance so running stats never leak between probes.
            let mut bnp = BatchNorm2d::new(2);
            bnp.gamma.assign(&gamma);
            bnp.beta.assign(&beta);
            let yp = bnp.forward_train(&xp);
            yp.iter().zip(r.iter()).map(|(a, b)| a * b).sum()
        });
        gradcheck::compare_grads(&gx.iter().copied().collect::<Vec<_>>(), &num, 1e-3, 1e-7)
            .unwrap();
    }

    #[test]
    fn eval_cached_backward_is_plain_affine_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut bn = BatchNorm2d::new(2);
        let warm: Array4<f64> = init::normal_array(&mut rng, (4, 2, 3, 3), 1.0);
        bn.forward_train(&warm);
        bn.cache = None;

        let x: Array4<f64> = init::normal_array(&mut rng, (2, 2, 3, 3), 1.0);
        bn.forward_eval_cached(&x);
        bn.zero_grad();
        let gy: Array4<f64> = init::normal_array(&mut rng, (2, 2, 3, 3), 1.0);
        let gx = bn.backward(&gy);
        for ci in 0..2 {
            let k = bn.gamma[ci] / (bn.running_var[ci] + bn.eps).sqrt();
            assert!((gx[[0, ci, 1, 1]] - k * gy[[0, ci, 1, 1]]).abs() < 1e-12);
        }
    }
}
