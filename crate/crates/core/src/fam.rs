//! Frequency-attention modulated fusion.
//!
//! Two mechanisms compose here. Spectral injection transplants the
//! low-frequency band of the guide stream into the detail stream:
//! both are taken to the frequency domain, blended inside a binary
//! low-frequency mask with a sigmoid-constrained weight α, and inverted
//! back. Spatial saliency gating then multiplies the result by a
//! single-channel attention map derived from the guide features, plus a
//! residual bias ε so early-training attention cannot zero the signal.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{add_batch_dim, drop_batch_dim, FeatureMap, FeaturePair, Tap};
use crate::error::{Error, Result};
use crate::fft::{dims3, irfft2, rfft2, vjp_irfft2, vjp_rfft2, SpectralTensor};
use crate::nn::conv::dims4;
use crate::nn::{gelu, gelu_backward, scoped, sigmoid, Conv2d, Params};

/// Open-interval clamp bound for sigmoid-constrained quantities. Keeps
/// α and attention values strictly inside (0,1) even at logit ±1e6,
/// where the raw sigmoid saturates to exactly 0 or 1 in f64.
const SIGMOID_CLAMP: f64 = 1e-12;

fn sigmoid_open(x: f64) -> f64 {
    sigmoid(x).clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
}

/// Geometry of the low-frequency region.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskShape {
    /// Disk in normalized frequency; radius normalized so gamma = 1
    /// covers every bin including the corners.
    #[default]
    Radial,
    /// Axis-aligned box: max(|fx|, |fy|) <= gamma.
    Rectangular,
}

/// Binary low-frequency mask over the half-spectrum grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LowFreqMask {
    /// `[H × W_half]`, entries exactly 0.0 or 1.0.
    pub mask: Array2<f64>,
    pub gamma: f64,
}

/// Normalized vertical frequency of row u: wrapped index over Nyquist.
pub fn norm_freq_y(u: usize, h: usize) -> f64 {
    u.min(h - u) as f64 / (h as f64 / 2.0)
}

/// Normalized horizontal frequency of half-spectrum column v.
pub fn norm_freq_x(v: usize, w_half: usize) -> f64 {
    if w_half <= 1 {
        0.0
    } else {
        v as f64 / (w_half - 1) as f64
    }
}

/// Build the binary low-frequency mask for an `H × W_half` half-spectrum.
/// A bin is low-frequency when its normalized radius (or box extent, for
/// rectangular masks) is at most gamma. The radial norm is scaled by
/// 1/sqrt(2) so gamma = 1 includes the corner bins and yields an all-ones
/// mask for either shape.
pub fn build_low_freq_mask(
    h: usize,
    w_half: usize,
    gamma: f64,
    shape: MaskShape,
) -> Result<LowFreqMask> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(format!(
            "gamma must lie in (0, 1], got {gamma}"
        )));
    }
    let mut mask = Array2::zeros((h, w_half));
    for u in 0..h {
        let fy = norm_freq_y(u, h);
        for v in 0..w_half {
            let fx = norm_freq_x(v, w_half);
            let r = match shape {
                MaskShape::Radial => ((fx * fx + fy * fy) / 2.0).sqrt(),
                MaskShape::Rectangular => fx.max(fy),
            };
            if r <= gamma {
                mask[[u, v]] = 1.0;
            }
        }
    }
    Ok(LowFreqMask { mask, gamma })
}

/// Scalar fusion knobs. `alpha_logit` is the initial value of the
/// learnable blend logit; the live copy is owned by [`FamFusion`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FusionParams {
    pub alpha_logit: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub gate_hidden_channels: usize,
    #[serde(default)]
    pub mask_shape: MaskShape,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams::for_channels(64)
    }
}

impl FusionParams {
    /// Defaults sized for `c` aligned channels: unbiased blend start,
    /// quarter-band mask, small constant residual bias, gate bottleneck
    /// at C/4 (floor 4).
    pub fn for_channels(c: usize) -> Self {
        FusionParams {
            alpha_logit: 0.0,
            gamma: 0.25,
            epsilon: 0.1,
            gate_hidden_channels: (c / 4).max(4),
            mask_shape: MaskShape::Radial,
        }
    }

    pub fn alpha(&self) -> f64 {
        sigmoid_open(self.alpha_logit)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!(
                "gamma {} outside (0, 1]",
                self.gamma
            )));
        }
        if self.epsilon < 0.0 {
            return Err(Error::config(format!("epsilon {} negative", self.epsilon)));
        }
        if self.gate_hidden_channels < 1 {
            return Err(Error::config("gate_hidden_channels must be >= 1"));
        }
        Ok(())
    }
}

/// Convex blend of two half-spectra inside the mask:
/// `Y_fused = Y_detail·(1 − α·M) + Y_guide·(α·M)`.
/// Outside the mask the detail bins are copied bit-for-bit.
pub fn spectral_mix(
    yd: &SpectralTensor,
    yg: &SpectralTensor,
    m: &LowFreqMask,
    alpha: f64,
) -> Result<SpectralTensor> {
    if yd.re.shape() != yg.re.shape() || yd.spatial_shape != yg.spatial_shape {
        return Err(Error::shape(format!(
            "spectral_mix operands {:?} (spatial {:?}) vs {:?} (spatial {:?})",
            yd.re.shape(),
            yd.spatial_shape,
            yg.re.shape(),
            yg.spatial_shape
        )));
    }
    let (c, h, wh) = dims3(&yd.re);
    if m.mask.shape() != [h, wh] {
        return Err(Error::shape(format!(
            "mask {:?} vs spectrum rows/cols {}x{}",
            m.mask.shape(),
            h,
            wh
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!(
            "alpha must lie in (0,1), got {alpha}"
        )));
    }
    let mut out = SpectralTensor::zeros(c, yd.spatial_shape.0, yd.spatial_shape.1);
    for ci in 0..c {
        for u in 0..h {
            for v in 0..wh {
                if m.mask[[u, v]] == 0.0 {
                    out.re[[ci, u, v]] = yd.re[[ci, u, v]];
                    out.im[[ci, u, v]] = yd.im[[ci, u, v]];
                } else {
                    let am = alpha * m.mask[[u, v]];
                    out.re[[ci, u, v]] = yd.re[[ci, u, v]] * (1.0 - am) + yg.re[[ci, u, v]] * am;
                    out.im[[ci, u, v]] = yd.im[[ci, u, v]] * (1.0 - am) + yg.im[[ci, u, v]] * am;
                }
            }
        }
    }
    Ok(out)
}

/// Spatial attention gate: `A = σ(Conv₂(GELU(Conv₁(F'_guide))))`,
/// `F_out = F_freq ⊙ (A + ε)` with A broadcast across channels.
pub struct SaliencyGate {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    cache: Option<GateCache>,
}

struct GateCache {
    pre_act: Array4<f64>,
    attention: Array4<f64>,
    f_freq: Array4<f64>,
}

impl SaliencyGate {
    pub fn new(channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        SaliencyGate {
            conv1: Conv2d::new(channels, hidden, 3, 1, 1, rng),
            conv2: Conv2d::new(hidden, 1, 3, 1, 1, rng),
            cache: None,
        }
    }

    /// Attention map from the guide stream alone, `[N × 1 × H × W]`.
    fn attention_train(&mut self, f_guide: &Array4<f64>) -> Array4<f64> {
        let z1 = self.conv1.forward(f_guide);
        let h1 = gelu(&z1);
        let z2 = self.conv2.forward(&h1);
        let a = z2.mapv(sigmoid_open);
        self.cache = Some(GateCache {
            pre_act: z1,
            attention: a.clone(),
            f_freq: Array4::zeros((0, 0, 0, 0)),
        });
        a
    }

    pub fn attention_eval(&self, f_guide: &Array4<f64>) -> Array4<f64> {
        let z1 = self.conv1.forward_eval(f_guide);
        let z2 = self.conv2.forward_eval(&gelu(&z1));
        z2.mapv(sigmoid_open)
    }

    pub fn forward_train(
        &mut self,
        f_freq: &Array4<f64>,
        f_guide: &Array4<f64>,
        epsilon: f64,
    ) -> Result<(Array4<f64>, Array4<f64>)> {
        let a = self.attention_train(f_guide);
        let out = apply_gate(f_freq, &a, epsilon)?;
        if let Some(c) = self.cache.as_mut() {
            c.f_freq = f_freq.clone();
        }
        Ok((out, a))
    }

    pub fn forward_eval(
        &self,
        f_freq: &Array4<f64>,
        f_guide: &Array4<f64>,
        epsilon: f64,
    ) -> Result<(Array4<f64>, Array4<f64>)> {
        let a = self.attention_eval(f_guide);
        Ok((apply_gate(f_freq, &a, epsilon)?, a))
    }

    /// Returns gradients w.r.t. (F_freq, F'_guide).
    pub fn backward(&mut self, g_out: &Array4<f64>, epsilon: f64) -> (Array4<f64>, Array4<f64>) {
        let cache = self
            .cache
            .take()
            .expect("SaliencyGate::backward without forward");
        let (n, c, h, w) = dims4(g_out);

        let mut g_freq = Array4::zeros((n, c, h, w));
        let mut g_a = Array4::zeros((n, 1, h, w));
        for ni in 0..n {
            for yi in 0..h {
                for xi in 0..w {
                    let a = cache.attention[[ni, 0, yi, xi]];
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let g = g_out[[ni, ci, yi, xi]];
                        g_freq[[ni, ci, yi, xi]] = g * (a + epsilon);
                        acc += g * cache.f_freq[[ni, ci, yi, xi]];
                    }
                    // d sigmoid = a(1-a) with the clamped activation.
                    g_a[[ni, 0, yi, xi]] = acc * a * (1.0 - a);
                }
            }
        }
        let g_h1 = self.conv2.backward(&g_a);
        let g_z1 = gelu_backward(&cache.pre_act, &g_h1);
        let g_guide = self.conv1.backward(&g_z1);
        (g_freq, g_guide)
    }
}

impl Params for SaliencyGate {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        self.conv1.visit(&mut scoped("conv1", f));
        self.conv2.visit(&mut scoped("conv2", f));
    }
}

fn apply_gate(f_freq: &Array4<f64>, a: &Array4<f64>, epsilon: f64) -> Result<Array4<f64>> {
    let (n, c, h, w) = dims4(f_freq);
    if a.shape() != [n, 1, h, w] {
        return Err(Error::shape(format!(
            "attention {:?} vs features {:?}",
            a.shape(),
            f_freq.shape()
        )));
    }
    let mut out = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    out[[ni, ci, yi, xi]] =
                        f_freq[[ni, ci, yi, xi]] * (a[[ni, 0, yi, xi]] + epsilon);
                }
            }
        }
    }
    Ok(out)
}

/// The full fusion module: spectral injection followed by saliency
/// gating, with ablation switches for both halves.
pub struct FamFusion {
    alpha_logit: Vec<f64>,
    grad_alpha_logit: Vec<f64>,
    pub gamma: f64,
    pub epsilon: f64,
    pub mask_shape: MaskShape,
    pub gate: SaliencyGate,
    pub use_spectral_injection: bool,
    pub use_saliency_gating: bool,
    cache: Option<FuseCache>,
}

struct FuseCache {
    detail: Array4<f64>,
    guide: Array4<f64>,
    mask: LowFreqMask,
}

impl FamFusion {
    pub fn new(channels: usize, params: &FusionParams, rng: &mut impl Rng) -> Result<Self> {
        params.validate()?;
        Ok(FamFusion {
            alpha_logit: vec![params.alpha_logit],
            grad_alpha_logit: vec![0.0],
            gamma: params.gamma,
            epsilon: params.epsilon,
            mask_shape: params.mask_shape,
            gate: SaliencyGate::new(channels, params.gate_hidden_channels, rng),
            use_spectral_injection: true,
            use_saliency_gating: true,
            cache: None,
        })
    }

    pub fn alpha_logit(&self) -> f64 {
        self.alpha_logit[0]
    }

    pub fn set_alpha_logit(&mut self, v: f64) {
        self.alpha_logit[0] = v;
    }

    pub fn alpha(&self) -> f64 {
        sigmoid_open(self.alpha_logit[0])
    }

    pub fn grad_alpha_logit(&self) -> f64 {
        self.grad_alpha_logit[0]
    }

    /// Spectral half only: per-sample rfft2 → mix → irfft2.
    fn spectral_forward(
        &self,
        detail: &Array4<f64>,
        guide: &Array4<f64>,
        mask: &LowFreqMask,
    ) -> Result<Array4<f64>> {
        let (n, c, h, w) = dims4(detail);
        let alpha = self.alpha();
        let mut out = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            let d3 = detail.index_axis(ndarray::Axis(0), ni).to_owned();
            let g3 = guide.index_axis(ndarray::Axis(0), ni).to_owned();
            let yd = rfft2(&d3)?;
            let yg = rfft2(&g3)?;
            let yf = spectral_mix(&yd, &yg, mask, alpha)?;
            let f = irfft2(&yf)?;
            out.index_axis_mut(ndarray::Axis(0), ni).assign(&f);
        }
        Ok(out)
    }

    /// Batched training forward. Returns F_out `[N × C × H × W]`.
    pub fn forward_train(
        &mut self,
        detail: &Array4<f64>,
        guide: &Array4<f64>,
    ) -> Result<Array4<f64>> {
        if detail.shape() != guide.shape() {
            return Err(Error::shape(format!(
                "fusion expects aligned shapes, got {:?} vs {:?}",
                detail.shape(),
                guide.shape()
            )));
        }
        let (_, _, h, w) = dims4(detail);
        let mask = build_low_freq_mask(h, w / 2 + 1, self.gamma, self.mask_shape)?;

        let f_freq = if self.use_spectral_injection {
            self.spectral_forward(detail, guide, &mask)?
        } else {
            detail.clone()
        };

        let out = if self.use_saliency_gating {
            let (out, _) = self.gate.forward_train(&f_freq, guide, self.epsilon)?;
            out
        } else {
            f_freq
        };
        self.cache = Some(FuseCache {
            detail: detail.clone(),
            guide: guide.clone(),
            mask,
        });
        Ok(out)
    }

    pub fn forward_eval(&self, detail: &Array4<f64>, guide: &Array4<f64>) -> Result<Array4<f64>> {
        if detail.shape() != guide.shape() {
            return Err(Error::shape(format!(
                "fusion expects aligned shapes, got {:?} vs {:?}",
                detail.shape(),
                guide.shape()
            )));
        }
        let (_, _, h, w) = dims4(detail);
        let mask = build_low_freq_mask(h, w / 2 + 1, self.gamma, self.mask_shape)?;
        let f_freq = if self.use_spectral_injection {
            self.spectral_forward(detail, guide, &mask)?
        } else {
            detail.clone()
        };
        if self.use_saliency_gating {
            let (out, _) = self.gate.forward_eval(&f_freq, guide, self.epsilon)?;
            Ok(out)
        } else {
            Ok(f_freq)
        }
    }

    /// Single-sample, spec-typed fusion of an aligned pair.
    pub fn fuse(&self, pair: &FeaturePair) -> Result<FeatureMap> {
        if pair.detail.tap != Tap::Aligned || pair.guide.tap != Tap::Aligned {
            return Err(Error::invalid("fuse expects an aligned pair"));
        }
        let d = add_batch_dim(&pair.detail.data);
        let g = add_batch_dim(&pair.guide.data);
        let out = self.forward_eval(&d, &g)?;
        Ok(FeatureMap::new(drop_batch_dim(out), Tap::Fused))
    }

    /// Returns gradients w.r.t. (detail, guide).
    pub fn backward(&mut self, g_out: &Array4<f64>) -> (Array4<f64>, Array4<f64>) {
        let cache = self
            .cache
            .take()
            .expect("FamFusion::backward without forward");
        let (n, c, h, w) = dims4(&cache.detail);

        let (g_freq, mut g_guide) = if self.use_saliency_gating {
            self.gate.backward(g_out, self.epsilon)
        } else {
            (g_out.clone(), Array4::zeros((n, c, h, w)))
        };

        let g_detail = if self.use_spectral_injection {
            let alpha = self.alpha();
            let mut g_detail = Array4::zeros((n, c, h, w));
            let mut g_alpha = 0.0;
            for ni in 0..n {
                let gf3 = g_freq.index_axis(ndarray::Axis(0), ni).to_owned();
                let gy = vjp_irfft2(&gf3);
                // Recompute the sample spectra; cheaper than caching them.
                let d3 = cache.detail.index_axis(ndarray::Axis(0), ni).to_owned();
                let g3 = cache.guide.index_axis(ndarray::Axis(0), ni).to_owned();
                let yd = rfft2(&d3).expect("cached detail finite");
                let yg = rfft2(&g3).expect("cached guide finite");

                let mut gyd = SpectralTensor::zeros(c, h, w);
                let mut gyg = SpectralTensor::zeros(c, h, w);
                for ci in 0..c {
                    for u in 0..h {
                        for v in 0..w / 2 + 1 {
                            let m = cache.mask.mask[[u, v]];
                            let am = alpha * m;
                            gyd.re[[ci, u, v]] = gy.re[[ci, u, v]] * (1.0 - am);
                            gyd.im[[ci, u, v]] = gy.im[[ci, u, v]] * (1.0 - am);
                            gyg.re[[ci, u, v]] = gy.re[[ci, u, v]] * am;
                            gyg.im[[ci, u, v]] = gy.im[[ci, u, v]] * am;
                            if m != 0.0 {
                                g_alpha += m
                                    * (gy.re[[ci, u, v]] * (yg.re[[ci, u, v]] - yd.re[[ci, u, v]])
                                        + gy.im[[ci, u, v]]
                                            * (yg.im[[ci, u, v]] - yd.im[[ci, u, v]]));
                            }
                        }
                    }
                }
                g_detail
                    .index_axis_mut(ndarray::Axis(0), ni)
                    .assign(&vjp_rfft2(&gyd));
                let gg_spec = vjp_rfft2(&gyg);
                let mut gg = g_guide.index_axis_mut(ndarray::Axis(0), ni);
                gg += &gg_spec;
            }
            let a = self.alpha();
            self.grad_alpha_logit[0] += g_alpha * a * (1.0 - a);
            g_detail
        } else {
            g_freq
        };

        (g_detail, g_guide)
    }
}

impl Params for FamFusion {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        if self.use_spectral_injection {
            f(
                "alpha_logit",
                &mut self.alpha_logit,
                &mut self.grad_alpha_logit,
            );
        }
        if self.use_saliency_gating {
            self.gate.visit(&mut scoped("gate", f));
        }
    }
}

/// Mean relative L2 distance between L1-normalized amplitude spectra,
/// averaged over channels and measured relative to the first argument.
/// Zero iff the normalized spectra coincide; in particular any positive
/// rescaling of the input leaves it at zero.
pub fn spectrum_stability(f: &Array3<f64>, corrupted: &Array3<f64>) -> Result<f64> {
    if f.shape() != corrupted.shape() {
        return Err(Error::shape(format!(
            "spectrum_stability shapes {:?} vs {:?}",
            f.shape(),
            corrupted.shape()
        )));
    }
    let ya = rfft2(f)?;
    let yb = rfft2(corrupted)?;
    let (c, h, wh) = dims3(&ya.re);
    let mut total = 0.0;
    for ci in 0..c {
        let mut amp_a = Vec::with_capacity(h * wh);
        let mut amp_b = Vec::with_capacity(h * wh);
        let mut sum_a = 0.0;
        let mut sum_b = 0.0;
        for u in 0..h {
            for v in 0..wh {
                let a = (ya.re[[ci, u, v]] * ya.re[[ci, u, v]]
                    + ya.im[[ci, u, v]] * ya.im[[ci, u, v]])
                .sqrt();
                let b = (yb.re[[ci, u, v]] * yb.re[[ci, u, v]]
                    + yb.im[[ci, u, v]] * yb.im[[ci, u, v]])
                .sqrt();
                amp_a.push(a);
                amp_b.push(b);
                sum_a += a;
                sum_b += b;
            }
        }
        if sum_a == 0.0 || sum_b == 0.0 {
            return Err(Error::invalid(format!(
                "spectrum_stability: channel {ci} is all zero, normalization undefined"
            )));
        }
        let mut dist2 = 0.0;
        let mut norm2 = 0.0;
        for i in 0..amp_a.len() {
            let na = amp_a[i] / sum_a;
            let nb = amp_b[i] / sum_b;
            dist2 += (na - nb) * (na - nb);
            norm2 += na * na;
        }
        total += (dist2 / norm2).sqrt();
    }
    Ok(total / c as f64)
}
