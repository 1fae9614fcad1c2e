//! 2D convolution via im2col + matrix multiply.
//!
//! The column matrix is rebuilt during backward instead of cached: it is
//! the largest intermediate by far, and rebuilding is cheap next to the
//! matrix products on either side of it. Data movement works on
//! contiguous row slices; on a single core the scalar copy loops would
//! otherwise cost more than the matrix products.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;

use crate::nn::{init, Params};

pub struct Conv2d {
    /// `[out_channels, in_channels, kh, kw]`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub grad_weight: Array4<f64>,
    pub grad_bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
    cache_input: Option<Array4<f64>>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: init::normal_array(
                rng,
                (out_channels, in_channels, kernel, kernel),
                init::he_std(fan_in),
            ),
            bias: Array1::zeros(out_channels),
            grad_weight: Array4::zeros((out_channels, in_channels, kernel, kernel)),
            grad_bias: Array1::zeros(out_channels),
            stride,
            padding,
            cache_input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let kh = self.weight.shape()[2];
        let kw = self.weight.shape()[3];
        (
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let y = self.forward_eval(x);
        self.cache_input = Some(x.clone());
        y
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = dims4(x);
        assert_eq!(c, self.in_channels(), "conv input channels");
        let kh = self.weight.shape()[2];
        let kw = self.weight.shape()[3];
        let (oh, ow) = self.out_spatial(h, w);
        let oc = self.out_channels();

        let cols = im2col(x, kh, kw, self.stride, self.padding, oh, ow);
        let w_mat = flatten_weight(&self.weight);
        let y_mat = w_mat.dot(&cols); // [oc, n*oh*ow]

        // Permute [oc, n*ohw] -> [n, oc, oh, ow]: both sides contiguous
        // per (sample, channel) plane.
        let mut y = Array4::zeros((n, oc, oh, ow));
        let ohw = oh * ow;
        let ys = y.as_slice_mut().unwrap();
        let ym = y_mat.as_slice().unwrap();
        for o in 0..oc {
            let b = self.bias[o];
            let src_row = &ym[o * n * ohw..(o + 1) * n * ohw];
            for ni in 0..n {
                let dst = &mut ys[(ni * oc + o) * ohw..(ni * oc + o + 1) * ohw];
                let src = &src_row[ni * ohw..(ni + 1) * ohw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let x = self
            .cache_input
            .take()
            .expect("Conv2d::backward called without cached forward");
        let (n, c, h, w) = dims4(&x);
        let kh = self.weight.shape()[2];
        let kw = self.weight.shape()[3];
        let (oh, ow) = self.out_spatial(h, w);
        let oc = self.out_channels();
        let ohw = oh * ow;

        // [oc, n*ohw] layout mirroring the forward product.
        let mut gy_mat = Array2::zeros((oc, n * ohw));
        {
            let gm = gy_mat.as_slice_mut().unwrap();
            let gs = gy.as_slice().unwrap();
            for o in 0..oc {
                let mut bias_acc = 0.0;
                let dst_row = &mut gm[o * n * ohw..(o + 1) * n * ohw];
                for ni in 0..n {
                    let src = &gs[(ni * oc + o) * ohw..(ni * oc + o + 1) * ohw];
                    dst_row[ni * ohw..(ni + 1) * ohw].copy_from_slice(src);
                    bias_acc += src.iter().sum::<f64>();
                }
                self.grad_bias[o] += bias_acc;
            }
        }

        let cols = im2col(&x, kh, kw, self.stride, self.padding, oh, ow);
        let gw_mat = gy_mat.dot(&cols.t()); // [oc, c*kh*kw]
                                            // grad_weight's row-major layout coincides with gw_mat's.
        for (d, s) in self
            .grad_weight
            .as_slice_mut()
            .unwrap()
            .iter_mut()
            .zip(gw_mat.as_slice().unwrap())
        {
            *d += s;
        }

        let w_mat = flatten_weight(&self.weight);
        let gcols = w_mat.t().dot(&gy_mat); // [c*kh*kw, n*ohw]
        col2im(
            &gcols,
            (n, c, h, w),
            kh,
            kw,
            self.stride,
            self.padding,
            oh,
            ow,
        )
    }
}

impl Params for Conv2d {
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

pub(crate) fn dims4(x: &Array4<f64>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

fn flatten_weight(w: &Array4<f64>) -> Array2<f64> {
    let s = w.shape();
    Array2::from_shape_vec((s[0], s[1] * s[2] * s[3]), w.as_slice().unwrap().to_vec()).unwrap()
}

/// Output-x range [lo, hi) for which the input column `ox*stride + kj - pad`
/// lands inside [0, w).
fn valid_ox_range(kj: usize, pad: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if kj >= pad {
        0
    } else {
        (pad - kj).div_ceil(stride)
    };
    // Largest ox with ox*stride + kj - pad <= w-1.
    let hi = if w + pad > kj {
        (((w + pad - kj - 1) / stride) + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfold `x` into `[c*kh*kw, n*oh*ow]` with zero padding.
fn im2col(
    x: &Array4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (n, c, h, w) = dims4(x);
    let mut cols = Array2::zeros((c * kh * kw, n * oh * ow));
    let cs = cols.as_slice_mut().unwrap();
    let xs = x.as_slice().unwrap();
    let row_len = n * oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let crow = &mut cs[row * row_len..(row + 1) * row_len];
                let (ox_lo, ox_hi) = valid_ox_range(kj, pad, stride, w, ow);
                for ni in 0..n {
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xs[((ni * c + ci) * h + iy as usize) * w..][..w];
                        let dst =
                            &mut crow[(ni * oh + oy) * ow + ox_lo..(ni * oh + oy) * ow + ox_hi];
                        if stride == 1 {
                            let ix0 = ox_lo + kj - pad;
                            dst.copy_from_slice(&xrow[ix0..ix0 + (ox_hi - ox_lo)]);
                        } else {
                            for (i, d) in dst.iter_mut().enumerate() {
                                *d = xrow[(ox_lo + i) * stride + kj - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the image grid.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    dims: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<f64> {
    let (n, c, h, w) = dims;
    let mut x = Array4::zeros((n, c, h, w));
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().unwrap();
    let row_len = n * oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let crow = &cs[row * row_len..(row + 1) * row_len];
                let (ox_lo, ox_hi) = valid_ox_range(kj, pad, stride, w, ow);
                for ni in 0..n {
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &mut xs[((ni * c + ci) * h + iy as usize) * w..][..w];
                        let src = &crow[(ni * oh + oy) * ow + ox_lo..(ni * oh + oy) * ow + ox_hi];
                        if stride == 1 {
                            let ix0 = ox_lo + kj - pad;
                            for (d, s) in xrow[ix0..ix0 + src.len()].iter_mut().zip(src) {
                                *d += s;
                            }
                        } else {
                            for (i, s) in src.iter().enumerate() {
                                xrow[(ox_lo + i) * stride + kj - pad] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
