//! Corner-aligned bilinear upsampling.
//!
//! Output pixel (oy, ox) samples source position
//! `oy·(H_in−1)/(H_out−1), ox·(W_in−1)/(W_out−1)`, so the four grid
//! corners map exactly onto source corners and interpolation weights sum
//! to one, so a constant field upsamples to the same constant.

use ndarray::Array4;

use crate::nn::conv::dims4;

fn src_pos(o: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    if in_len == 1 || out_len == 1 {
        return (0, 0, 0.0);
    }
    let pos = o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let lo = pos.floor() as usize;
    let lo = lo.min(in_len - 2);
    (lo, lo + 1, pos - lo as f64)
}

pub fn bilinear_upsample(x: &Array4<f64>, oh: usize, ow: usize) -> Array4<f64> {
    let (n, c, h, w) = dims4(x);
    let mut y = Array4::zeros((n, c, oh, ow));
    for oy in 0..oh {
        let (y0, y1, ty) = src_pos(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, tx) = src_pos(ox, w, ow);
            let w00 = (1.0 - ty) * (1.0 - tx);
            let w01 = (1.0 - ty) * tx;
            let w10 = ty * (1.0 - tx);
            let w11 = ty * tx;
            for ni in 0..n {
                for ci in 0..c {
                    y[[ni, ci, oy, ox]] = w00 * x[[ni, ci, y0, x0]]
                        + w01 * x[[ni, ci, y0, x1]]
                        + w10 * x[[ni, ci, y1, x0]]
                        + w11 * x[[ni, ci, y1, x1]];
                }
            }
        }
    }
    y
}

/// Adjoint of [`bilinear_upsample`]: scatter the output gradient back with
/// the same interpolation weights.
pub fn bilinear_upsample_backward(gy: &Array4<f64>, ih: usize, iw: usize) -> Array4<f64> {
    let (n, c, oh, ow) = dims4(gy);
    let mut gx = Array4::zeros((n, c, ih, iw));
    for oy in 0..oh {
        let (y0, y1, ty) = src_pos(oy, ih, oh);
        for ox in 0..ow {
            let (x0, x1, tx) = src_pos(ox, iw, ow);
            let w00 = (1.0 - ty) * (1.0 - tx);
            let w01 = (1.0 - ty) * tx;
            let w10 = ty * (1.0 - tx);
            let w11 = ty * tx;
            for ni in 0..n {
                for ci in 0..c {
                    let g = gy[[ni, ci, oy, ox]];
                    gx[[ni, ci, y0, x0]] += w00 * g;
                    gx[[ni, ci, y0, x1]] += w01 * g;
                    gx[[ni, ci, y1, x0]] += w10 * g;
                    gx[[ni, ci, y1, x1]] += w11 * g;
                }
            }
        }
    }
    gx
}
