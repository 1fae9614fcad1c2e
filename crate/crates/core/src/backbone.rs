//! Backbone CNN with two feature taps, and the alignment block that maps
//! both taps to a shared channel width at the shallow tap's resolution.
//!
//! The backbone is a stack of conv(3×3) → batch-norm → GELU stages.
//! Stage 0 keeps resolution; every later stage downsamples by 2. Two
//! stage outputs are exposed: a shallow high-resolution "detail" tap and
//! a deep low-resolution "guide" tap. Stages past the guide tap would be
//! dead weight and are not built.

use ndarray::{Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    bilinear_upsample, bilinear_upsample_backward, gelu, gelu_backward, scoped, scoped_buf,
    BatchNorm2d, Conv2d, Params,
};

/// Which stage of the pipeline a feature map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tap {
    Detail,
    Guide,
    Aligned,
    Fused,
    Output,
}

/// Single-sample feature tensor `[C × H × W]` tagged with its origin.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub tap: Tap,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, tap: Tap) -> Self {
        FeatureMap { data, tap }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }
}

/// Aligned detail/guide pair with identical shapes.
#[derive(Debug, Clone)]
pub struct FeaturePair {
    pub detail: FeatureMap,
    pub guide: FeatureMap,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub detail_stage_index: usize,
    pub guide_stage_index: usize,
    /// Shared channel width C both taps are projected to.
    pub aligned_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stage_channels: vec![16, 32, 64, 128],
            detail_stage_index: 1,
            guide_stage_index: 3,
            aligned_channels: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 1 || self.aligned_channels < 1 {
            return Err(Error::config("channel counts must be >= 1"));
        }
        if self.stage_channels.iter().any(|&c| c < 1) {
            return Err(Error::config("stage channel counts must be >= 1"));
        }
        if self.detail_stage_index >= self.guide_stage_index {
            return Err(Error::config(format!(
                "detail stage {} must come before guide stage {}",
                self.detail_stage_index, self.guide_stage_index
            )));
        }
        if self.guide_stage_index >= self.stage_channels.len() {
            return Err(Error::config(format!(
                "guide stage {} out of range for {} stages",
                self.guide_stage_index,
                self.stage_channels.len()
            )));
        }
        Ok(())
    }

    pub fn detail_channels(&self) -> usize {
        self.stage_channels[self.detail_stage_index]
    }

    pub fn guide_channels(&self) -> usize {
        self.stage_channels[self.guide_stage_index]
    }
}

/// conv → batch-norm → GELU with a cached pre-GELU activation.
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    cache_pre_act: Option<Array4<f64>>,
}

impl ConvBlock {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(in_c, out_c, kernel, stride, padding, rng),
            bn: BatchNorm2d::new(out_c),
            cache_pre_act: None,
        }
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let z = self.conv.forward(x);
        let z = self.bn.forward_train(&z);
        let y = gelu(&z);
        self.cache_pre_act = Some(z);
        y
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        gelu(&self.bn.forward_eval(&self.conv.forward_eval(x)))
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let z = self
            .cache_pre_act
            .take()
            .expect("ConvBlock::backward without forward");
        let gz = gelu_backward(&z, gy);
        let gz = self.bn.backward(&gz);
        self.conv.backward(&gz)
    }
}

impl Params for ConvBlock {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        self.conv.visit(&mut scoped("conv", f));
        self.bn.visit(&mut scoped("bn", f));
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.bn.visit_buffers(&mut scoped_buf("bn", f));
    }
}

pub struct Backbone {
    pub cfg: BackboneConfig,
    stages: Vec<ConvBlock>,
    /// Upstream gradient entry points recorded during forward.
    cache_shapes: Option<(usize, usize)>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut in_c = cfg.in_channels;
        for (i, &out_c) in cfg
            .stage_channels
            .iter()
            .enumerate()
            .take(cfg.guide_stage_index + 1)
        {
            let stride = if i == 0 { 1 } else { 2 };
            stages.push(ConvBlock::new(in_c, out_c, 3, stride, 1, rng));
            in_c = out_c;
        }
        Ok(Backbone {
            cfg,
            stages,
            cache_shapes: None,
        })
    }

    fn check_divisible(&self, h: usize, w: usize) -> Result<()> {
        let (mut h, mut w) = (h, w);
        for i in 1..=self.cfg.guide_stage_index {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(format!(
                    "stage {i} needs an even input size but got {h}x{w}"
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }

    /// Training forward over a batch. Returns (detail, guide) activations.
    pub fn forward_train(&mut self, x: &Array4<f64>) -> Result<(Array4<f64>, Array4<f64>)> {
        self.check_divisible(x.shape()[2], x.shape()[3])?;
        self.cache_shapes = Some((x.shape()[2], x.shape()[3]));
        let mut cur = x.clone();
        let mut detail = None;
        for (i, stage) in self.stages.iter_mut().enumerate() {
            cur = stage.forward_train(&cur);
            if i == self.cfg.detail_stage_index {
                detail = Some(cur.clone());
            }
        }
        Ok((detail.expect("detail tap within stage range"), cur))
    }

    /// Deterministic eval-mode forward (frozen normalization statistics).
    pub fn forward_eval(&self, x: &Array4<f64>) -> Result<(Array4<f64>, Array4<f64>)> {
        self.check_divisible(x.shape()[2], x.shape()[3])?;
        let mut cur = x.clone();
        let mut detail = None;
        for (i, stage) in self.stages.iter().enumerate() {
            cur = stage.forward_eval(&cur);
            if i == self.cfg.detail_stage_index {
                detail = Some(cur.clone());
            }
        }
        Ok((detail.expect("detail tap within stage range"), cur))
    }

    /// Single-sample tap extraction with spec-level typing (eval mode).
    pub fn taps(&self, x: &Array3<f64>) -> Result<(FeatureMap, FeatureMap)> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let x4 = x
            .to_shape((1, c, h, w))
            .map_err(|e| Error::shape(e.to_string()))?
            .to_owned();
        let (d, g) = self.forward_eval(&x4)?;
        let ds = d.shape().to_vec();
        let gs = g.shape().to_vec();
        Ok((
            FeatureMap::new(
                d.into_shape_with_order((ds[1], ds[2], ds[3])).unwrap(),
                Tap::Detail,
            ),
            FeatureMap::new(
                g.into_shape_with_order((gs[1], gs[2], gs[3])).unwrap(),
                Tap::Guide,
            ),
        ))
    }

    /// Backward from gradients at both taps to the input gradient.
    /// `g_detail` enters at the detail stage output in addition to the
    /// gradient flowing down from deeper stages.
    pub fn backward(&mut self, g_detail: &Array4<f64>, g_guide: &Array4<f64>) -> Array4<f64> {
        let mut g = g_guide.clone();
        for i in (0..self.stages.len()).rev() {
            if i == self.cfg.detail_stage_index {
                g += g_detail;
            }
            g = self.stages[i].backward(&g);
        }
        g
    }
}

impl Params for Backbone {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit(&mut scoped(&format!("stage{i}"), f));
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_buffers(&mut scoped_buf(&format!("stage{i}"), f));
        }
    }
}

/// 1×1 projection + normalization + GELU on both taps, then bilinear
/// upsampling of the guide stream to the detail resolution.
pub struct AlignBlock {
    pub proj_detail: ConvBlock,
    pub proj_guide: ConvBlock,
    cache_guide_hw: Option<(usize, usize)>,
}

impl AlignBlock {
    pub fn new(detail_c: usize, guide_c: usize, aligned_c: usize, rng: &mut impl Rng) -> Self {
        AlignBlock {
            proj_detail: ConvBlock::new(detail_c, aligned_c, 1, 1, 0, rng),
            proj_guide: ConvBlock::new(guide_c, aligned_c, 1, 1, 0, rng),
            cache_guide_hw: None,
        }
    }

    fn check_sizes(detail: &Array4<f64>, guide: &Array4<f64>) -> Result<()> {
        let (dh, dw) = (detail.shape()[2], detail.shape()[3]);
        let (gh, gw) = (guide.shape()[2], guide.shape()[3]);
        if gh > dh || gw > dw {
            return Err(Error::invalid(format!(
                "guide {gh}x{gw} is spatially larger than detail {dh}x{dw}"
            )));
        }
        Ok(())
    }

    /// Returns (F'_detail, F'_guide), both `[N × C × H_d × W_d]`.
    pub fn forward_train(
        &mut self,
        detail: &Array4<f64>,
        guide: &Array4<f64>,
    ) -> Result<(Array4<f64>, Array4<f64>)> {
        Self::check_sizes(detail, guide)?;
        self.cache_guide_hw = Some((guide.shape()[2], guide.shape()[3]));
        let d = self.proj_detail.forward_train(detail);
        let g = self.proj_guide.forward_train(guide);
        let g = bilinear_upsample(&g, detail.shape()[2], detail.shape()[3]);
        Ok((d, g))
    }

    pub fn forward_eval(
        &self,
        detail: &Array4<f64>,
        guide: &Array4<f64>,
    ) -> Result<(Array4<f64>, Array4<f64>)> {
        Self::check_sizes(detail, guide)?;
        let d = self.proj_detail.forward_eval(detail);
        let g = self.proj_guide.forward_eval(guide);
        let g = bilinear_upsample(&g, detail.shape()[2], detail.shape()[3]);
        Ok((d, g))
    }

    /// Single-sample, spec-typed variant; checks tap provenance.
    pub fn align(&self, detail: &FeatureMap, guide: &FeatureMap) -> Result<FeaturePair> {
        if detail.tap != Tap::Detail || guide.tap != Tap::Guide {
            return Err(Error::invalid(format!(
                "align expects (detail, guide) taps, got ({:?}, {:?})",
                detail.tap, guide.tap
            )));
        }
        let d4 = add_batch_dim(&detail.data);
        let g4 = add_batch_dim(&guide.data);
        let (d, g) = self.forward_eval(&d4, &g4)?;
        Ok(FeaturePair {
            detail: FeatureMap::new(drop_batch_dim(d), Tap::Aligned),
            guide: FeatureMap::new(drop_batch_dim(g), Tap::Aligned),
        })
    }

    pub fn backward(
        &mut self,
        g_detail_aligned: &Array4<f64>,
        g_guide_aligned: &Array4<f64>,
    ) -> (Array4<f64>, Array4<f64>) {
        let (gh, gw) = self
            .cache_guide_hw
            .take()
            .expect("AlignBlock::backward without forward");
        let g_up = bilinear_upsample_backward(g_guide_aligned, gh, gw);
        let gd = self.proj_detail.backward(g_detail_aligned);
        let gg = self.proj_guide.backward(&g_up);
        (gd, gg)
    }
}

impl Params for AlignBlock {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        self.proj_detail.visit(&mut scoped("detail", f));
        self.proj_guide.visit(&mut scoped("guide", f));
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.proj_detail.visit_buffers(&mut scoped_buf("detail", f));
        self.proj_guide.visit_buffers(&mut scoped_buf("guide", f));
    }
}

pub(crate) fn add_batch_dim(x: &Array3<f64>) -> Array4<f64> {
    let s = x.shape();
    x.to_shape((1, s[0], s[1], s[2])).unwrap().to_owned()
}

pub(crate) fn drop_batch_dim(x: Array4<f64>) -> Array3<f64> {
    let s = x.shape().to_vec();
    assert_eq!(s[0], 1);
    x.into_shape_with_order((s[1], s[2], s[3])).unwrap()
}
