//! Full model assembly: backbone taps → channel alignment → frequency
//! fusion with saliency gating → coordinate-aware regression, plus an
//! optional linear projection feeding the anchor-separation loss.
//!
//! Ablation switches change the architecture, not just the loss: with
//! spectral injection off the fused map is the detail stream, with gating
//! off the gate is bypassed, and without the separation head the anchor
//! set is never read.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{AlignBlock, Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::fam::{FamFusion, FusionParams};
use crate::geometry::GazeAngles;
use crate::head::{
    attach_coords_backward, attach_coords_batch, mean_pool, mean_pool_backward, HeadConfig,
    RegressionHead,
};
use crate::losses::{angular_loss_grad, smooth_l1_grad, LossReport, LossWeights};
use crate::nn::{scoped, scoped_buf, Linear, Params};
use crate::sdm::{separation_loss_with_grad, AnchorSet};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fusion: FusionParams,
    pub head: HeadConfig,
    /// Width of the anchor-separation embedding.
    pub embed_dim: usize,
    pub use_spectral_injection: bool,
    pub use_saliency_gating: bool,
    pub use_sdm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let fusion = FusionParams::for_channels(backbone.aligned_channels);
        ModelConfig {
            backbone,
            fusion,
            head: HeadConfig::default(),
            embed_dim: 64,
            use_spectral_injection: true,
            use_saliency_gating: true,
            use_sdm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.fusion.validate()?;
        self.head.validate()?;
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be positive"));
        }
        Ok(())
    }

    /// Width of the pooled gaze descriptor (aligned channels + 2 coords).
    pub fn descriptor_dim(&self) -> usize {
        self.backbone.aligned_channels + 2
    }
}

/// Everything the backward pass and the loss need from one forward pass.
pub struct ForwardOutput {
    /// Raw head output, `[N, 2]` as (yaw, pitch).
    pub out: Array2<f64>,
    /// Pooled descriptor `[N, C+2]`.
    pub f_gaze: Array2<f64>,
    /// Projected embedding `[N, D]`; None when the separation head is off.
    pub embed: Option<Array2<f64>>,
    /// Spatial size of the fused map, needed to un-pool gradients.
    fused_hw: (usize, usize),
}

impl ForwardOutput {
    pub fn predictions(&self) -> Vec<GazeAngles> {
        (0..self.out.nrows())
            .map(|i| GazeAngles::new(self.out[[i, 0]], self.out[[i, 1]]))
            .collect()
    }
}

pub struct GazeModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub align: AlignBlock,
    pub fusion: FamFusion,
    pub head: RegressionHead,
    /// Linear map from the gaze descriptor into anchor space.
    pub proj: Option<Linear>,
}

impl GazeModel {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(cfg.backbone.clone(), rng)?;
        let align = AlignBlock::new(
            cfg.backbone.detail_channels(),
            cfg.backbone.guide_channels(),
            cfg.backbone.aligned_channels,
            rng,
        );
        let mut fusion = FamFusion::new(cfg.backbone.aligned_channels, &cfg.fusion, rng)?;
        fusion.use_spectral_injection = cfg.use_spectral_injection;
        fusion.use_saliency_gating = cfg.use_saliency_gating;
        let head = RegressionHead::new(cfg.descriptor_dim(), &cfg.head, rng)?;
        let proj = if cfg.use_sdm {
            Some(Linear::new(cfg.descriptor_dim(), cfg.embed_dim, rng))
        } else {
            None
        };
        Ok(GazeModel {
            cfg: cfg.clone(),
            backbone,
            align,
            fusion,
            head,
            proj,
        })
    }

    pub fn forward_train(&mut self, images: &Array4<f64>) -> Result<ForwardOutput> {
        let (detail, guide) = self.backbone.forward_train(images)?;
        let (d_al, g_al) = self.align.forward_train(&detail, &guide)?;
        let fused = self.fusion.forward_train(&d_al, &g_al)?;
        let fused_hw = (fused.shape()[2], fused.shape()[3]);
        let with_coords = attach_coords_batch(&fused)?;
        let f_gaze = mean_pool(&with_coords);
        let out = self.head.forward_train(&f_gaze)?;
        let embed = self.proj.as_mut().map(|p| p.forward(&f_gaze));
        Ok(ForwardOutput {
            out,
            f_gaze,
            embed,
            fused_hw,
        })
    }

    pub fn forward_eval(&self, images: &Array4<f64>) -> Result<ForwardOutput> {
        let (detail, guide) = self.backbone.forward_eval(images)?;
        let (d_al, g_al) = self.align.forward_eval(&detail, &guide)?;
        let fused = self.fusion.forward_eval(&d_al, &g_al)?;
        let fused_hw = (fused.shape()[2], fused.shape()[3]);
        let with_coords = attach_coords_batch(&fused)?;
        let f_gaze = mean_pool(&with_coords);
        let out = self.head.forward_eval(&f_gaze)?;
        let embed = self.proj.as_ref().map(|p| p.forward_eval(&f_gaze));
        Ok(ForwardOutput {
            out,
            f_gaze,
            embed,
            fused_hw,
        })
    }

    /// Single-image inference.
    pub fn predict(&self, image: &Array3<f64>) -> Result<GazeAngles> {
        let s = image.shape();
        let x = image
            .to_shape((1, s[0], s[1], s[2]))
            .map_err(|e| Error::shape(format!("predict input: {e}")))?
            .to_owned();
        let out = self.forward_eval(&x)?;
        Ok(out.predictions()[0])
    }

    /// Batch loss: mean over samples of regression + angular terms, plus
    /// the anchor-separation term when the separation head is active.
    /// Returns the report and the gradients w.r.t. head output and
    /// embedding, already scaled for the batch mean.
    pub fn batch_loss(
        &self,
        fwd: &ForwardOutput,
        labels: &[GazeAngles],
        anchors: Option<&AnchorSet>,
        w: &LossWeights,
    ) -> Result<(LossReport, Array2<f64>, Option<Array2<f64>>)> {
        let n = fwd.out.nrows();
        if labels.len() != n {
            return Err(Error::shape(format!(
                "batch has {n} outputs but {} labels",
                labels.len()
            )));
        }
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let use_sep = self.cfg.use_sdm && w.lambda_sep != 0.0;
        let anchors = if use_sep {
            Some(anchors.ok_or_else(|| {
                Error::config("separation loss enabled but no anchor set provided")
            })?)
        } else {
            None
        };

        let scale = 1.0 / n as f64;
        let mut g_out = Array2::zeros((n, 2));
        let mut g_embed = anchors
            .map(|a| {
                a.expect_dim(self.cfg.embed_dim)?;
                Ok::<_, Error>(Array2::zeros((n, a.dim())))
            })
            .transpose()?;
        let (mut l1_sum, mut ang_sum, mut sep_sum) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let pred = GazeAngles::new(fwd.out[[i, 0]], fwd.out[[i, 1]]);
            let (l1, gl1) = smooth_l1_grad(&labels[i], &pred, w.smooth_l1_beta)?;
            let (ang, gang) = angular_loss_grad(&labels[i], &pred)?;
            l1_sum += l1;
            ang_sum += ang;
            g_out[[i, 0]] = scale * (gl1[0] + w.lambda_ang * gang[0]);
            g_out[[i, 1]] = scale * (gl1[1] + w.lambda_ang * gang[1]);
            if let (Some(a), Some(ge)) = (anchors, g_embed.as_mut()) {
                let e = fwd
                    .embed
                    .as_ref()
                    .expect("separation head active but no embedding")
                    .row(i)
                    .to_owned();
                let (sep, gsep, _degenerate) = separation_loss_with_grad(&e, a)?;
                sep_sum += sep;
                for d in 0..gsep.len() {
                    ge[[i, d]] = scale * w.lambda_sep * gsep[d];
                }
            }
        }
        let report = LossReport {
            l1: scale * l1_sum,
            ang: scale * ang_sum,
            sep: scale * sep_sum,
            total: scale * (l1_sum + w.lambda_ang * ang_sum + w.lambda_sep * sep_sum),
        };
        Ok((report, g_out, g_embed))
    }

    /// Backpropagate the gradients produced by `batch_loss` through the
    /// whole network. Must follow a `forward_train` call.
    pub fn backward(
        &mut self,
        fwd: &ForwardOutput,
        g_out: &Array2<f64>,
        g_embed: Option<&Array2<f64>>,
    ) -> Result<()> {
        let mut g_fgaze = self.head.backward(g_out);
        if let Some(ge) = g_embed {
            let proj = self
                .proj
                .as_mut()
                .ok_or_else(|| Error::config("embedding gradient without separation head"))?;
            g_fgaze += &proj.backward(ge);
        }
        let (h, w) = fwd.fused_hw;
        let g_pooled = mean_pool_backward(&g_fgaze, h, w);
        let g_fused = attach_coords_backward(&g_pooled);
        let (g_d_al, g_g_al) = self.fusion.backward(&g_fused);
        let (g_detail, g_guide) = self.align.backward(&g_d_al, &g_g_al);
        self.backbone.backward(&g_detail, &g_guide);
        Ok(())
    }

    /// Convenience wrapper: forward, loss, backward in one call.
    pub fn train_step(
        &mut self,
        images: &Array4<f64>,
        labels: &[GazeAngles],
        anchors: Option<&AnchorSet>,
        w: &LossWeights,
    ) -> Result<LossReport> {
        let fwd = self.forward_train(images)?;
        let (report, g_out, g_embed) = self.batch_loss(&fwd, labels, anchors, w)?;
        self.backward(&fwd, &g_out, g_embed.as_ref())?;
        Ok(report)
    }

    /// Learnable parameter tensor names, in visit order.
    pub fn param_names(&mut self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, _, _| names.push(name.to_string()));
        names
    }
}

impl Params for GazeModel {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        self.backbone.visit(&mut scoped("backbone", f));
        self.align.visit(&mut scoped("align", f));
        self.fusion.visit(&mut scoped("fusion", f));
        self.head.visit(&mut scoped("head", f));
        if let Some(p) = &mut self.proj {
            p.visit(&mut scoped("proj", f));
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.backbone.visit_buffers(&mut scoped_buf("backbone", f));
        self.align.visit_buffers(&mut scoped_buf("align", f));
        self.fusion.visit_buffers(&mut scoped_buf("fusion", f));
        self.head.visit_buffers(&mut scoped_buf("head", f));
        if let Some(p) = &mut self.proj {
            p.visit_buffers(&mut scoped_buf("proj", f));
        }
    }
}
