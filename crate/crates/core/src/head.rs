//! Coordinate-aware regression head: normalized coordinate maps are
//! appended as two extra channels, the stack is mean-pooled into a single
//! vector (also exposed to the semantic disentanglement branch), and an
//! MLP regresses yaw and pitch in radians.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::GazeAngles;
use crate::nn::conv::dims4;
use crate::nn::{gelu, gelu_backward, scoped, Linear, Params};

/// Normalized coordinate grids, both `[H × W]` with entries in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct CoordMaps {
    pub cx: Array2<f64>,
    pub cy: Array2<f64>,
}

/// `C_x(h,w) = 2w/(W−1) − 1`, `C_y(h,w) = 2h/(H−1) − 1`, evaluated as
/// `(2w − (W−1)) / (W−1)` so mirrored positions are exact negations:
/// the numerator is an integer and IEEE division is sign-symmetric.
pub fn make_coord_maps(h: usize, w: usize) -> Result<CoordMaps> {
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!(
            "coordinate maps need H, W >= 2, got {h}x{w}"
        )));
    }
    let mut cx = Array2::zeros((h, w));
    let mut cy = Array2::zeros((h, w));
    for hi in 0..h {
        let vy = (2 * hi as i64 - (h as i64 - 1)) as f64 / (h - 1) as f64;
        for wi in 0..w {
            let vx = (2 * wi as i64 - (w as i64 - 1)) as f64 / (w - 1) as f64;
            cx[[hi, wi]] = vx;
            cy[[hi, wi]] = vy;
        }
    }
    Ok(CoordMaps { cx, cy })
}

/// Append cx and cy as channels C and C+1 of a single-sample feature map.
/// The feature slice is copied bit-exactly; the tap tag is preserved.
pub fn attach_coords(f: &FeatureMap) -> Result<FeatureMap> {
    let (h, w) = f.spatial();
    let coords = make_coord_maps(h, w)?;
    let c = f.channels();
    let mut out = ndarray::Array3::zeros((c + 2, h, w));
    out.slice_mut(ndarray::s![..c, .., ..]).assign(&f.data);
    out.slice_mut(ndarray::s![c, .., ..]).assign(&coords.cx);
    out.slice_mut(ndarray::s![c + 1, .., ..]).assign(&coords.cy);
    Ok(FeatureMap::new(out, f.tap))
}

/// Batched [`attach_coords`].
pub fn attach_coords_batch(x: &Array4<f64>) -> Result<Array4<f64>> {
    let (n, c, h, w) = dims4(x);
    let coords = make_coord_maps(h, w)?;
    let mut out = Array4::zeros((n, c + 2, h, w));
    out.slice_mut(ndarray::s![.., ..c, .., ..]).assign(x);
    for ni in 0..n {
        out.slice_mut(ndarray::s![ni, c, .., ..]).assign(&coords.cx);
        out.slice_mut(ndarray::s![ni, c + 1, .., ..])
            .assign(&coords.cy);
    }
    Ok(out)
}

/// Drop the gradient of the two constant coordinate channels.
pub fn attach_coords_backward(g: &Array4<f64>) -> Array4<f64> {
    let (_, c, _, _) = dims4(g);
    g.slice(ndarray::s![.., ..c - 2, .., ..]).to_owned()
}

/// Mean over one spatial plane, summed as symmetric position pairs.
/// For the coordinate channels the pair members are exact negations, so
/// every pair contributes literal 0.0 and the mean is exactly zero.
fn pooled_plane(plane: &[f64]) -> f64 {
    let n = plane.len();
    let mut acc = 0.0;
    for k in 0..n / 2 {
        acc += plane[k] + plane[n - 1 - k];
    }
    if n % 2 == 1 {
        acc += plane[n / 2];
    }
    acc / n as f64
}

/// Global mean pool `[N × C × H × W] → [N × C]`.
pub fn mean_pool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, _, _) = dims4(x);
    let mut out = Array2::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ci);
            out[[ni, ci]] = pooled_plane(plane.as_slice().expect("contiguous plane"));
        }
    }
    out
}

/// Gradient of [`mean_pool`]: every spatial position receives g/(H·W).
pub fn mean_pool_backward(g: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = (g.shape()[0], g.shape()[1]);
    let scale = 1.0 / (h * w) as f64;
    let mut out = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            out.slice_mut(ndarray::s![ni, ci, .., ..])
                .fill(g[[ni, ci]] * scale);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Mean,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct HeadConfig {
    pub pool: PoolKind,
    pub mlp_hidden: Vec<usize>,
    pub out_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            pool: PoolKind::Mean,
            mlp_hidden: vec![128, 64],
            out_dim: 2,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_dim != 2 {
            return Err(Error::config(format!(
                "regression head must output (yaw, pitch), got out_dim {}",
                self.out_dim
            )));
        }
        if self.mlp_hidden.iter().any(|&h| h < 1) {
            return Err(Error::config("MLP hidden widths must be >= 1"));
        }
        Ok(())
    }
}

/// MLP with GELU on hidden layers and a raw linear output.
pub struct RegressionHead {
    pub in_dim: usize,
    layers: Vec<Linear>,
    cache_pre_acts: Vec<Array2<f64>>,
}

impl RegressionHead {
    pub fn new(in_dim: usize, cfg: &HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut prev = in_dim;
        for &h in &cfg.mlp_hidden {
            layers.push(Linear::new(prev, h, rng));
            prev = h;
        }
        layers.push(Linear::new(prev, cfg.out_dim, rng));
        Ok(RegressionHead {
            in_dim,
            layers,
            cache_pre_acts: Vec::new(),
        })
    }

    /// `[N × in_dim] → [N × 2]`, caching hidden pre-activations.
    pub fn forward_train(&mut self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_width(x)?;
        self.cache_pre_acts.clear();
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let z = layer.forward(&cur);
            if i < last {
                cur = gelu(&z);
                self.cache_pre_acts.push(z);
            } else {
                cur = z;
            }
        }
        Ok(cur)
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_width(x)?;
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward_eval(&cur);
            cur = if i < last { gelu(&z) } else { z };
        }
        Ok(cur)
    }

    pub fn backward(&mut self, gy: &Array2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut g = self.layers[last].backward(gy);
        for i in (0..last).rev() {
            let z = &self.cache_pre_acts[i];
            let gz = gelu_backward(z, &g);
            g = self.layers[i].backward(&gz);
        }
        self.cache_pre_acts.clear();
        g
    }

    fn check_width(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.in_dim {
            return Err(Error::shape(format!(
                "head expects {} pooled features, got {}",
                self.in_dim,
                x.ncols()
            )));
        }
        Ok(())
    }
}

impl Params for RegressionHead {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit(&mut scoped(&format!("mlp{i}"), f));
        }
    }
}

/// Single-sample regression: attach coordinates, mean-pool, run the MLP.
/// Returns the predicted angles and the pooled feature vector that the
/// semantic branch projects from.
pub fn regress(f_out: &FeatureMap, head: &RegressionHead) -> Result<(GazeAngles, Array1<f64>)> {
    let with_coords = attach_coords(f_out)?;
    let s = with_coords.data.shape().to_vec();
    let x4 = with_coords
        .data
        .to_shape((1, s[0], s[1], s[2]))
        .map_err(|e| Error::shape(e.to_string()))?
        .to_owned();
    let pooled = mean_pool(&x4);
    let out = head.forward_eval(&pooled)?;
    let f_gaze = pooled.row(0).to_owned();
    Ok((
        GazeAngles {
            yaw: out[[0, 0]],
            pitch: out[[0, 1]],
        },
        f_gaze,
    ))
}
