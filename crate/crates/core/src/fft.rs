//! Real 2D FFT with explicit (re, im) storage and exact adjoints.
//!
//! Conventions, fixed so every oracle is bit-stable:
//! - forward `rfft2` is unnormalized and keeps the non-redundant half
//!   spectrum along the last axis (`Wh = W/2 + 1` bins);
//! - `irfft2` applies the 1/(H·W) factor.
//!
//! The backward maps treat the half spectrum as a flat real vector
//! (re and im independently), which is exactly how downstream layers
//! consume it. Under that inner product:
//! - `vjp_rfft2(g)` = real part of the unnormalized full inverse DFT of
//!   `g` zero-padded onto the redundant columns;
//! - `vjp_irfft2(gx)` = `c_v/(H·W) · rfft2(gx)`, where `c_v` is 1 on the
//!   self-conjugate columns (v = 0, and v = W/2 for even W) and 2 on the
//!   mirrored ones; the factor counts how many full-spectrum bins each
//!   stored bin feeds through hermitian extension.

use std::sync::{Arc, Mutex, OnceLock};

use ndarray::Array3;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Half-spectrum of a real `[C × H × W]` tensor: `re`/`im` are
/// `[C × H × (W/2+1)]` and `spatial_shape` remembers the original (H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralTensor {
    pub re: Array3<f64>,
    pub im: Array3<f64>,
    pub spatial_shape: (usize, usize),
}

impl SpectralTensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        SpectralTensor {
            re: Array3::zeros((c, h, w / 2 + 1)),
            im: Array3::zeros((c, h, w / 2 + 1)),
            spatial_shape: (h, w),
        }
    }

    pub fn channels(&self) -> usize {
        self.re.shape()[0]
    }

    /// Validates the re/im shape agreement and the half-spectrum width.
    pub fn check(&self) -> Result<()> {
        if self.re.shape() != self.im.shape() {
            return Err(Error::shape(format!(
                "spectral re {:?} vs im {:?}",
                self.re.shape(),
                self.im.shape()
            )));
        }
        let (h, w) = self.spatial_shape;
        if self.re.shape()[1] != h || self.re.shape()[2] != w / 2 + 1 {
            return Err(Error::invalid(format!(
                "spectral dims {:?} inconsistent with spatial shape {}x{}",
                self.re.shape(),
                h,
                w
            )));
        }
        Ok(())
    }
}

static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut planner = PLANNER
        .get_or_init(|| Mutex::new(FftPlanner::new()))
        .lock()
        .unwrap();
    if inverse {
        planner.plan_fft_inverse(len)
    } else {
        planner.plan_fft_forward(len)
    }
}

/// Weight of stored bin column v in the full spectrum: 1 for the
/// self-conjugate columns, 2 for columns that hermitian extension mirrors.
pub fn hermitian_weight(v: usize, w: usize) -> f64 {
    if v == 0 || (w.is_multiple_of(2) && v == w / 2) {
        1.0
    } else {
        2.0
    }
}

/// Unnormalized forward real FFT of each channel plane, half spectrum.
pub fn rfft2(f: &Array3<f64>) -> Result<SpectralTensor> {
    let (c, h, w) = dims3(f);
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("rfft2 input contains non-finite values"));
    }
    let wh = w / 2 + 1;
    let fft_w = plan(w, false);
    let fft_h = plan(h, false);
    let mut scratch = vec![
        Complex::new(0.0, 0.0);
        fft_w
            .get_inplace_scratch_len()
            .max(fft_h.get_inplace_scratch_len())
    ];
    let mut out = SpectralTensor::zeros(c, h, w);

    let fs = f.as_slice().unwrap();
    let mut half = vec![Complex::new(0.0, 0.0); h * wh];
    let mut rowbuf = vec![Complex::new(0.0, 0.0); w];
    let mut colbuf = vec![Complex::new(0.0, 0.0); h];
    for ci in 0..c {
        for y in 0..h {
            let src = &fs[(ci * h + y) * w..][..w];
            for (b, v) in rowbuf.iter_mut().zip(src) {
                *b = Complex::new(*v, 0.0);
            }
            fft_w.process_with_scratch(&mut rowbuf, &mut scratch);
            half[y * wh..(y + 1) * wh].copy_from_slice(&rowbuf[..wh]);
        }
        for v in 0..wh {
            for u in 0..h {
                colbuf[u] = half[u * wh + v];
            }
            fft_h.process_with_scratch(&mut colbuf, &mut scratch);
            for (u, c) in colbuf.iter().enumerate() {
                out.re[[ci, u, v]] = c.re;
                out.im[[ci, u, v]] = c.im;
            }
        }
    }
    Ok(out)
}

/// Full-plane complex inverse transform shared by `irfft2` and
/// `vjp_rfft2`; unnormalized, result left in `full` (row-major [H][W]).
fn inverse_full(full: &mut [Complex<f64>], h: usize, w: usize) {
    let ifft_w = plan(w, true);
    let ifft_h = plan(h, true);
    let mut scratch = vec![
        Complex::new(0.0, 0.0);
        ifft_w
            .get_inplace_scratch_len()
            .max(ifft_h.get_inplace_scratch_len())
    ];
    let mut colbuf = vec![Complex::new(0.0, 0.0); h];
    for v in 0..w {
        for u in 0..h {
            colbuf[u] = full[u * w + v];
        }
        ifft_h.process_with_scratch(&mut colbuf, &mut scratch);
        for u in 0..h {
            full[u * w + v] = colbuf[u];
        }
    }
    for u in 0..h {
        ifft_w.process_with_scratch(&mut full[u * w..(u + 1) * w], &mut scratch);
    }
}

/// Inverse of [`rfft2`]: hermitian-extends the half spectrum onto the
/// full plane, inverse transforms, applies 1/(H·W).
pub fn irfft2(y: &SpectralTensor) -> Result<Array3<f64>> {
    y.check()?;
    let (h, w) = y.spatial_shape;
    let c = y.channels();
    let wh = w / 2 + 1;
    let scale = 1.0 / (h * w) as f64;
    let mut out = Array3::zeros((c, h, w));
    let os = out.as_slice_mut().unwrap();
    let mut full = vec![Complex::new(0.0, 0.0); h * w];
    for ci in 0..c {
        for u in 0..h {
            for v in 0..wh {
                full[u * w + v] = Complex::new(y.re[[ci, u, v]], y.im[[ci, u, v]]);
            }
            for v in wh..w {
                let mu = (h - u) % h;
                let mv = w - v;
                full[u * w + v] = Complex::new(y.re[[ci, mu, mv]], -y.im[[ci, mu, mv]]);
            }
        }
        inverse_full(&mut full, h, w);
        let dst = &mut os[ci * h * w..][..h * w];
        for (d, s) in dst.iter_mut().zip(full.iter()) {
            *d = s.re * scale;
        }
    }
    Ok(out)
}

/// Gradient of a scalar loss w.r.t. the real input of [`rfft2`], given
/// the loss gradient w.r.t. the stored half spectrum.
pub fn vjp_rfft2(g: &SpectralTensor) -> Array3<f64> {
    g.check().expect("vjp_rfft2: malformed spectral gradient");
    let (h, w) = g.spatial_shape;
    let c = g.channels();
    let wh = w / 2 + 1;
    let mut out = Array3::zeros((c, h, w));
    let os = out.as_slice_mut().unwrap();
    let mut full = vec![Complex::new(0.0, 0.0); h * w];
    for ci in 0..c {
        for cell in full.iter_mut() {
            *cell = Complex::new(0.0, 0.0);
        }
        for u in 0..h {
            for v in 0..wh {
                full[u * w + v] = Complex::new(g.re[[ci, u, v]], g.im[[ci, u, v]]);
            }
        }
        inverse_full(&mut full, h, w);
        let dst = &mut os[ci * h * w..][..h * w];
        for (d, s) in dst.iter_mut().zip(full.iter()) {
            *d = s.re;
        }
    }
    out
}

/// Gradient of a scalar loss w.r.t. the half spectrum input of
/// [`irfft2`], given the loss gradient w.r.t. the spatial output.
pub fn vjp_irfft2(gx: &Array3<f64>) -> SpectralTensor {
    let (c, h, w) = dims3(gx);
    let mut g = rfft2(gx).expect("vjp_irfft2: non-finite spatial gradient");
    let wh = w / 2 + 1;
    let scale = 1.0 / (h * w) as f64;
    for ci in 0..c {
        for u in 0..h {
            for v in 0..wh {
                let k = hermitian_weight(v, w) * scale;
                g.re[[ci, u, v]] *= k;
                g.im[[ci, u, v]] *= k;
            }
        }
    }
    g
}

pub(crate) fn dims3(x: &Array3<f64>) -> (usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2])
}
