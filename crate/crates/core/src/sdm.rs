//! Semantic disentanglement: projection of the pooled gaze feature into
//! a fixed text-anchor embedding space and the absolute-cosine separation
//! loss that pushes the gaze embedding away from every appearance anchor,
//! whichever sign the correlation has.
//!
//! Anchors are ingested from a binary file produced offline; tests and
//! the default pipeline use a deterministic pseudo-encoder so nothing
//! external is ever downloaded.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{init, Linear};

/// Embedding norm below which the separation loss is defined as zero
/// instead of dividing by a vanishing length.
pub const DEGENERATE_NORM: f64 = 1e-8;

/// Appearance-factor prompt pool shipped as the default anchor text set.
pub const DEFAULT_PROMPTS: [&str; 8] = [
    "a driver wearing sunglasses",
    "a driver wearing a face mask",
    "a driver wearing eyeglasses",
    "a face in harsh sunlight",
    "a face in low light",
    "a face with a beard",
    "a driver wearing a hat",
    "an occluded face",
];

pub fn default_prompt_pool() -> Vec<String> {
    DEFAULT_PROMPTS.iter().map(|s| s.to_string()).collect()
}

const MAGIC: &[u8; 10] = b"LISA-ANCH\0";
const VERSION: u32 = 1;

/// Frozen text-anchor matrix: one unit-norm row per prompt.
///
/// Entries are stored at f32 precision (widened to f64) so the binary
/// file format round-trips bit-exactly. The two atomic counters audit
/// usage: `access_count` increments whenever the matrix is read, which
/// lets ablation tests prove the no-SDM variant never touches it;
/// `degenerate_count` tallies separation-loss calls that hit the
/// near-zero-embedding guard.
#[derive(Debug)]
pub struct AnchorSet {
    embeddings: Array2<f64>,
    pub prompts: Vec<String>,
    pub normalized: bool,
    access_count: AtomicU64,
    degenerate_count: AtomicU64,
}

impl Clone for AnchorSet {
    fn clone(&self) -> Self {
        AnchorSet {
            embeddings: self.embeddings.clone(),
            prompts: self.prompts.clone(),
            normalized: self.normalized,
            access_count: AtomicU64::new(0),
            degenerate_count: AtomicU64::new(0),
        }
    }
}

impl AnchorSet {
    /// Build from raw rows: validates, unit-normalizes each row (rows
    /// already within 1e-6 of unit norm are kept verbatim), and rounds
    /// entries to f32 precision.
    pub fn new(embeddings: Array2<f64>, prompts: Vec<String>) -> Result<Self> {
        let (n, d) = (embeddings.shape()[0], embeddings.shape()[1]);
        if n == 0 || d == 0 {
            return Err(Error::invalid(format!(
                "anchor matrix must be non-empty, got {n}x{d}"
            )));
        }
        if prompts.len() != n {
            return Err(Error::invalid(format!(
                "{} prompts for {n} anchor rows",
                prompts.len()
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("anchor matrix contains non-finite entries"));
        }
        let mut emb = embeddings;
        for mut row in emb.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm < DEGENERATE_NORM {
                return Err(Error::invalid("anchor row has near-zero norm"));
            }
            if (norm - 1.0).abs() > 1e-6 {
                row.mapv_inplace(|v| v / norm);
            }
        }
        emb.mapv_inplace(|v| v as f32 as f64);
        Ok(AnchorSet {
            embeddings: emb,
            prompts,
            normalized: true,
            access_count: AtomicU64::new(0),
            degenerate_count: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    /// The anchor matrix. Every call is recorded in the access counter.
    pub fn embeddings(&self) -> &Array2<f64> {
        self.access_count.fetch_add(1, Ordering::Relaxed);
        &self.embeddings
    }

    pub fn access_count(&self) -> u64 {
        self.access_count.load(Ordering::Relaxed)
    }

    pub fn degenerate_count(&self) -> u64 {
        self.degenerate_count.load(Ordering::Relaxed)
    }

    /// Error if the anchor dimension disagrees with the model's
    /// embedding dimension.
    pub fn expect_dim(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(Error::config(format!(
                "anchor dimension {} does not match model embedding dimension {d}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Deterministic stand-in for a frozen text encoder: a SHA-256 digest of
/// the prompt seeds a fixed-algorithm PRNG whose normal draws are
/// normalized to a unit vector. Identical across runs and platforms.
pub fn pseudo_text_encoder(prompt: &str, d: usize) -> Result<Array1<f64>> {
    if d < 1 {
        return Err(Error::invalid("embedding dimension must be >= 1"));
    }
    let digest = Sha256::digest(prompt.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    loop {
        let v: Array1<f64> = init::normal_array(&mut rng, d, 1.0);
        let norm = v.dot(&v).sqrt();
        if norm > DEGENERATE_NORM {
            return Ok(v / norm);
        }
    }
}

/// Encode a prompt list with the pseudo-encoder.
pub fn build_anchor_set(prompts: &[String], d: usize) -> Result<AnchorSet> {
    if prompts.is_empty() {
        return Err(Error::invalid("prompt pool is empty"));
    }
    let mut emb = Array2::zeros((prompts.len(), d));
    for (i, p) in prompts.iter().enumerate() {
        emb.row_mut(i).assign(&pseudo_text_encoder(p, d)?);
    }
    AnchorSet::new(emb, prompts.to_vec())
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Serialize to the binary anchor format: magic, version, N, D, row-major
/// little-endian f32 matrix, then a JSON array of prompts.
pub fn save_anchors(path: impl AsRef<Path>, anchors: &AnchorSet) -> Result<()> {
    let path = path.as_ref();
    let (n, d) = (anchors.len(), anchors.dim());
    let mut buf = Vec::with_capacity(22 + 4 * n * d);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in anchors.embeddings.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let json = serde_json::to_vec(&anchors.prompts)
        .map_err(|e| Error::invalid(format!("prompt serialization failed: {e}")))?;
    buf.extend_from_slice(&json);
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse the binary anchor format. Rows are unit-normalized on load;
/// rows already unit-norm keep their f32 bit patterns, which makes
/// save → load → save reproduce the file byte-for-byte.
pub fn load_anchors(path: impl AsRef<Path>) -> Result<AnchorSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 10 || &bytes[..10] != MAGIC {
        return Err(parse_err(0, "bad magic, expected LISA-ANCH"));
    }
    let u32_at = |off: usize| -> Result<u32> {
        let end = off + 4;
        if bytes.len() < end {
            return Err(parse_err(off, "truncated header"));
        }
        Ok(u32::from_le_bytes(bytes[off..end].try_into().unwrap()))
    };
    let version = u32_at(10)?;
    if version != VERSION {
        return Err(parse_err(10, format!("unsupported version {version}")));
    }
    let n = u32_at(14)? as usize;
    if n == 0 {
        return Err(parse_err(14, "anchor count must be >= 1"));
    }
    let d = u32_at(18)? as usize;
    if d == 0 {
        return Err(parse_err(18, "anchor dimension must be >= 1"));
    }
    let floats_start = 22;
    let floats_len = 4 * n * d;
    let json_start = floats_start + floats_len;
    if bytes.len() < json_start {
        return Err(parse_err(
            floats_start,
            format!(
                "embedding block needs {floats_len} bytes, file has {}",
                bytes.len() - floats_start
            ),
        ));
    }
    let mut emb = Array2::zeros((n, d));
    for i in 0..n * d {
        let off = floats_start + 4 * i;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(parse_err(off, "non-finite embedding entry"));
        }
        emb[[i / d, i % d]] = v;
    }
    let prompts: Vec<String> = serde_json::from_slice(&bytes[json_start..])
        .map_err(|e| parse_err(json_start, format!("prompt block: {e}")))?;
    if prompts.len() != n {
        return Err(parse_err(
            json_start,
            format!("{} prompts for {n} anchor rows", prompts.len()),
        ));
    }
    AnchorSet::new(emb, prompts)
}

/// Load and check the anchor dimension against the model config.
pub fn load_anchors_for(path: impl AsRef<Path>, d: usize) -> Result<AnchorSet> {
    let a = load_anchors(path)?;
    a.expect_dim(d)?;
    Ok(a)
}

/// Gaze feature projected into the anchor space.
#[derive(Debug, Clone)]
pub struct GazeEmbedding {
    pub vector: Array1<f64>,
}

/// Single affine map from the pooled feature to the anchor space.
pub fn project_gaze(f_gaze: &Array1<f64>, proj: &Linear) -> Result<GazeEmbedding> {
    if f_gaze.len() != proj.in_dim() {
        return Err(Error::shape(format!(
            "projection expects {} features, got {}",
            proj.in_dim(),
            f_gaze.len()
        )));
    }
    let x = f_gaze
        .to_shape((1, f_gaze.len()))
        .map_err(|e| Error::shape(e.to_string()))?
        .to_owned();
    let y = proj.forward_eval(&x);
    let vector = y.row(0).to_owned();
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("gaze embedding contains non-finite entries"));
    }
    Ok(GazeEmbedding { vector })
}

/// Mean absolute cosine between the embedding and every anchor row:
/// `(1/N) Σᵢ |cos(e, E_text,i)|`, in [0, 1]. A near-zero embedding is
/// defined to have loss 0 (the cosine direction is meaningless there);
/// each such call bumps the anchor set's degenerate counter.
pub fn separation_loss(e: &Array1<f64>, anchors: &AnchorSet) -> Result<f64> {
    Ok(separation_loss_with_grad(e, anchors)?.0)
}

/// Loss plus its gradient with respect to `e`. The absolute-value
/// subgradient at cos = 0 is taken as 0. Returns (loss, grad, degenerate).
pub fn separation_loss_with_grad(
    e: &Array1<f64>,
    anchors: &AnchorSet,
) -> Result<(f64, Array1<f64>, bool)> {
    if e.len() != anchors.dim() {
        return Err(Error::shape(format!(
            "embedding dimension {} vs anchor dimension {}",
            e.len(),
            anchors.dim()
        )));
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("embedding contains non-finite entries"));
    }
    let norm_e = e.dot(e).sqrt();
    if norm_e < DEGENERATE_NORM {
        anchors.degenerate_count.fetch_add(1, Ordering::Relaxed);
        return Ok((0.0, Array1::zeros(e.len()), true));
    }
    let emb = anchors.embeddings();
    let n = anchors.len() as f64;
    let e_hat = e / norm_e;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(e.len());
    for row in emb.rows() {
        let norm_a = row.dot(&row).sqrt();
        let a_hat = row.mapv(|v| v / norm_a);
        let cos = e_hat.dot(&a_hat);
        loss += cos.abs();
        let sign = if cos > 0.0 {
            1.0
        } else if cos < 0.0 {
            -1.0
        } else {
            0.0
        };
        // d|cos|/de = sign(cos) (â − cos·ê) / ‖e‖
        grad = grad + (a_hat - &e_hat * cos).mapv(|v| sign * v / norm_e);
    }
    Ok((loss / n, grad / n, false))
}
