//! Synthetic face/eye image generator with exact gaze labels.
//!
//! Faces are stylized, not photoreal: an ellipse head with per-subject
//! albedo and head shape, two eye ellipses at canonical positions, and
//! anti-aliased iris disks whose displacement inside each eye is an exact
//! deterministic function of the gaze label. Corruption operators mimic
//! accessories, occlusion, and lighting shifts without ever touching the
//! label. Everything is a pure function of (spec, index), so generation
//! order cannot change the data.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GazeAngles;

/// One labelled image: pixels in [0,1], CHW layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeSample {
    pub image: Array3<f64>,
    pub gaze: GazeAngles,
    pub attrs: Vec<String>,
    pub subject_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptTag {
    Glasses,
    Mask,
    Bright,
    Dark,
    Noise,
    Occluder,
}

impl CorruptTag {
    pub const ALL: [CorruptTag; 6] = [
        CorruptTag::Glasses,
        CorruptTag::Mask,
        CorruptTag::Bright,
        CorruptTag::Dark,
        CorruptTag::Noise,
        CorruptTag::Occluder,
    ];
}

impl fmt::Display for CorruptTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CorruptTag::Glasses => "glasses",
            CorruptTag::Mask => "mask",
            CorruptTag::Bright => "bright",
            CorruptTag::Dark => "dark",
            CorruptTag::Noise => "noise",
            CorruptTag::Occluder => "occluder",
        };
        f.write_str(s)
    }
}

impl FromStr for CorruptTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "glasses" => Ok(CorruptTag::Glasses),
            "mask" => Ok(CorruptTag::Mask),
            "bright" => Ok(CorruptTag::Bright),
            "dark" => Ok(CorruptTag::Dark),
            "noise" => Ok(CorruptTag::Noise),
            "occluder" => Ok(CorruptTag::Occluder),
            other => Err(Error::invalid(format!("unknown corruption tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CorruptionSpec {
    pub tag: CorruptTag,
    pub severity: f64,
    pub probability: f64,
}

/// Full description of a synthetic dataset. Rendering is a pure function
/// of this struct, so two reads of the same spec produce identical data.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SceneSpec {
    pub yaw_range: (f64, f64),
    pub pitch_range: (f64, f64),
    pub image_size: (usize, usize),
    pub n_subjects: usize,
    pub n_samples: usize,
    #[serde(default)]
    pub corruptions: Vec<CorruptionSpec>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            yaw_range: (-0.6, 0.6),
            pitch_range: (-0.35, 0.35),
            image_size: (64, 64),
            n_subjects: 30,
            n_samples: 512,
            corruptions: Vec::new(),
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let half_pi = std::f64::consts::FRAC_PI_2;
        for (name, (lo, hi)) in [("yaw", self.yaw_range), ("pitch", self.pitch_range)] {
            if !(lo <= hi && lo > -half_pi && hi < half_pi) {
                return Err(Error::config(format!(
                    "{name} range ({lo}, {hi}) must sit inside (-pi/2, pi/2)"
                )));
            }
        }
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return Err(Error::config(format!(
                "image size {h}x{w} too small for face geometry (min 16)"
            )));
        }
        if self.n_subjects < 1 {
            return Err(Error::config("n_subjects must be >= 1"));
        }
        for c in &self.corruptions {
            if !(0.0..=1.0).contains(&c.severity) {
                return Err(Error::config(format!(
                    "severity {} for {} outside [0,1]",
                    c.severity, c.tag
                )));
            }
            if !(0.0..=1.0).contains(&c.probability) {
                return Err(Error::config(format!(
                    "probability {} for {} outside [0,1]",
                    c.probability, c.tag
                )));
            }
        }
        Ok(())
    }
}

/// Canonical face geometry in pixels, derived only from the image size.
/// Region boxes are (y0, y1, x0, x1), half-open.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceGeometry {
    pub eye_y: f64,
    pub left_eye_x: f64,
    pub right_eye_x: f64,
    /// Eye ellipse semi-axes.
    pub eye_rx: f64,
    pub eye_ry: f64,
    pub iris_r: f64,
    /// Iris displacement amplitudes: dx = amp_x·sin(yaw), dy = amp_y·sin(pitch).
    pub amp_x: f64,
    pub amp_y: f64,
}

impl FaceGeometry {
    pub fn for_size(h: usize, w: usize) -> FaceGeometry {
        let (hf, wf) = (h as f64, w as f64);
        let eye_rx = 0.10 * wf;
        let eye_ry = 0.08 * hf;
        let iris_r = 0.04 * wf;
        FaceGeometry {
            eye_y: 0.40 * hf,
            left_eye_x: 0.34 * wf,
            right_eye_x: 0.66 * wf,
            eye_rx,
            eye_ry,
            iris_r,
            amp_x: eye_rx - iris_r,
            amp_y: eye_ry - iris_r,
        }
    }

    /// Iris center offset from the eye center for a gaze label.
    pub fn iris_offset(&self, gaze: GazeAngles) -> (f64, f64) {
        (self.amp_x * gaze.yaw.sin(), self.amp_y * gaze.pitch.sin())
    }
}

/// Pixel-box regions used by corruption operators and the eval grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionBoxes {
    pub left_eye: (usize, usize, usize, usize),
    pub right_eye: (usize, usize, usize, usize),
    pub lower_face: (usize, usize, usize, usize),
}

pub fn canonical_regions(h: usize, w: usize) -> RegionBoxes {
    let g = FaceGeometry::for_size(h, w);
    let eye_box = |cx: f64| {
        let y0 = (g.eye_y - g.eye_ry - 1.0).floor().max(0.0) as usize;
        let y1 = ((g.eye_y + g.eye_ry + 1.0).ceil() as usize).min(h);
        let x0 = (cx - g.eye_rx - 1.0).floor().max(0.0) as usize;
        let x1 = ((cx + g.eye_rx + 1.0).ceil() as usize).min(w);
        (y0, y1, x0, x1)
    };
    RegionBoxes {
        left_eye: eye_box(g.left_eye_x),
        right_eye: eye_box(g.right_eye_x),
        lower_face: ((0.55 * h as f64) as usize, h, 0, w),
    }
}

fn stream_rng(seed: u64, index: u64, stream: u8) -> ChaCha8Rng {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_le_bytes());
    s[8..16].copy_from_slice(&index.to_le_bytes());
    s[16] = stream;
    ChaCha8Rng::from_seed(s)
}

const STREAM_LABEL: u8 = 0;
const STREAM_CORRUPT: u8 = 1;
const STREAM_SUBJECT: u8 = 2;

/// Width of the smooth edge band in pixels. A C¹ profile this wide keeps
/// the sub-pixel correlation surface free of pixel-locking ripple, which
/// the decoding oracle needs to hit sub-degree accuracy.
const EDGE_BAND: f64 = 2.0;

/// C¹ falloff from 1 (signed distance ≤ -band/2) to 0 (≥ +band/2).
fn edge_profile(d: f64) -> f64 {
    let s = (0.5 - d / EDGE_BAND).clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

/// Anti-aliased coverage of an axis-aligned ellipse at a pixel center.
fn ellipse_cov(px: f64, py: f64, cx: f64, cy: f64, a: f64, b: f64) -> f64 {
    let nx = (px - cx) / a;
    let ny = (py - cy) / b;
    let e = (nx * nx + ny * ny).sqrt();
    edge_profile((e - 1.0) * a.min(b))
}

fn disk_cov(px: f64, py: f64, cx: f64, cy: f64, r: f64) -> f64 {
    edge_profile(((px - cx).powi(2) + (py - cy).powi(2)).sqrt() - r)
}

fn blend(img: &mut Array3<f64>, y: usize, x: usize, color: [f64; 3], cov: f64) {
    if cov <= 0.0 {
        return;
    }
    for c in 0..3 {
        img[[c, y, x]] = cov * color[c] + (1.0 - cov) * img[[c, y, x]];
    }
}

/// Per-subject appearance parameters, a pure function of (seed, id).
struct SubjectParams {
    skin: [f64; 3],
    iris: [f64; 3],
    background: f64,
    head_a: f64,
    head_b: f64,
}

fn subject_params(spec: &SceneSpec, subject_id: usize) -> SubjectParams {
    let mut rng = stream_rng(spec.seed, subject_id as u64, STREAM_SUBJECT);
    let (h, w) = spec.image_size;
    let jitter = |rng: &mut ChaCha8Rng, base: f64, amp: f64| base + rng.gen_range(-amp..amp);
    SubjectParams {
        skin: [
            jitter(&mut rng, 0.76, 0.08),
            jitter(&mut rng, 0.60, 0.08),
            jitter(&mut rng, 0.50, 0.08),
        ],
        iris: [
            jitter(&mut rng, 0.10, 0.05),
            jitter(&mut rng, 0.12, 0.06),
            jitter(&mut rng, 0.25, 0.10),
        ],
        background: jitter(&mut rng, 0.12, 0.05),
        head_a: jitter(&mut rng, 0.38, 0.03) * w as f64,
        head_b: jitter(&mut rng, 0.45, 0.03) * h as f64,
    }
}

const SCLERA: [f64; 3] = [0.93, 0.93, 0.90];
const PUPIL: [f64; 3] = [0.02, 0.02, 0.03];
const MOUTH: [f64; 3] = [0.45, 0.20, 0.20];

/// Render one face with an explicit label. Deterministic in
/// (spec.seed, subject_id, gaze).
pub fn render_face(spec: &SceneSpec, subject_id: usize, gaze: GazeAngles) -> Array3<f64> {
    let (h, w) = spec.image_size;
    let (hf, wf) = (h as f64, w as f64);
    let geom = FaceGeometry::for_size(h, w);
    let sp = subject_params(spec, subject_id);
    let (dx, dy) = geom.iris_offset(gaze);

    let mut img = Array3::from_elem((3, h, w), sp.background);
    let (head_cx, head_cy) = (0.5 * wf, 0.5 * hf);
    let mouth_cy = 0.72 * hf;
    let nose_cy = 0.55 * hf;

    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            blend(
                &mut img,
                y,
                x,
                sp.skin,
                ellipse_cov(px, py, head_cx, head_cy, sp.head_a, sp.head_b),
            );
            for eye_cx in [geom.left_eye_x, geom.right_eye_x] {
                let eye = ellipse_cov(px, py, eye_cx, geom.eye_y, geom.eye_rx, geom.eye_ry);
                if eye > 0.0 {
                    blend(&mut img, y, x, SCLERA, eye);
                    // Iris and pupil are clipped by the eye ellipse.
                    let icx = eye_cx + dx;
                    let icy = geom.eye_y + dy;
                    let iris = disk_cov(px, py, icx, icy, geom.iris_r) * eye;
                    blend(&mut img, y, x, sp.iris, iris);
                    let pupil = disk_cov(px, py, icx, icy, geom.iris_r * 0.45) * eye;
                    blend(&mut img, y, x, PUPIL, pupil);
                }
            }
            blend(
                &mut img,
                y,
                x,
                sp.iris,
                ellipse_cov(px, py, head_cx, nose_cy, 0.02 * wf, 0.03 * hf),
            );
            blend(
                &mut img,
                y,
                x,
                MOUTH,
                ellipse_cov(px, py, head_cx, mouth_cy, 0.14 * wf, 0.03 * hf),
            );
        }
    }
    img
}

/// Apply one corruption operator. The gaze label is never modified;
/// severity 0 returns the image bit-identical with only the tag added.
pub fn corrupt(
    sample: &GazeSample,
    tag: CorruptTag,
    severity: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GazeSample> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::invalid(format!("severity {severity} outside [0,1]")));
    }
    let mut out = sample.clone();
    out.attrs.retain(|a| a != "clean");
    out.attrs.push(tag.to_string());
    if severity == 0.0 {
        return Ok(out);
    }
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    let regions = canonical_regions(h, w);
    match tag {
        CorruptTag::Bright => {
            let k = 1.0 + 0.8 * severity;
            out.image.mapv_inplace(|v| (v * k).clamp(0.0, 1.0));
        }
        CorruptTag::Dark => {
            let k = 1.0 - 0.8 * severity;
            out.image.mapv_inplace(|v| (v * k).clamp(0.0, 1.0));
        }
        CorruptTag::Noise => {
            let normal = Normal::new(0.0, 0.2 * severity).expect("positive sigma");
            out.image
                .mapv_inplace(|v| (v + normal.sample(rng)).clamp(0.0, 1.0));
        }
        CorruptTag::Glasses => {
            // Dark lens rectangles over both eye boxes, opacity = severity.
            let lens = [0.08, 0.08, 0.10];
            for (y0, y1, x0, x1) in [regions.left_eye, regions.right_eye] {
                let y0 = y0.saturating_sub(1);
                let y1 = (y1 + 1).min(h);
                let x0 = x0.saturating_sub(1);
                let x1 = (x1 + 1).min(w);
                for y in y0..y1 {
                    for x in x0..x1 {
                        blend(&mut out.image, y, x, lens, severity);
                    }
                }
            }
        }
        CorruptTag::Mask => {
            let mask_color = [0.60, 0.70, 0.80];
            let (y0, y1, x0, x1) = regions.lower_face;
            for y in y0..y1 {
                for x in x0..x1 {
                    blend(&mut out.image, y, x, mask_color, severity);
                }
            }
        }
        CorruptTag::Occluder => {
            // A patch confined to one half of the image so the opposite
            // eye stays fully clean.
            let left_side = rng.gen_bool(0.5);
            let half = w / 2;
            let max_w = (w as f64 * 0.4) as usize;
            let pw = rng.gen_range(w / 8..=max_w.min(half));
            let x0 = if left_side {
                rng.gen_range(0..=half - pw)
            } else {
                rng.gen_range(half..=w - pw)
            };
            let ph = rng.gen_range(h / 3..=h);
            let y0 = rng.gen_range(0..=h - ph);
            let color = [0.15, 0.15, 0.15];
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    blend(&mut out.image, y, x, color, severity.max(0.9));
                }
            }
        }
    }
    Ok(out)
}

/// Render sample `index` of the scene: label and subject are drawn from
/// per-index seed streams, then the corruption schedule fires
/// independently per entry.
pub fn render_sample(spec: &SceneSpec, index: usize) -> Result<GazeSample> {
    spec.validate()?;
    let mut label_rng = stream_rng(spec.seed, index as u64, STREAM_LABEL);
    let yaw = label_rng.gen_range(spec.yaw_range.0..=spec.yaw_range.1);
    let pitch = label_rng.gen_range(spec.pitch_range.0..=spec.pitch_range.1);
    let gaze = GazeAngles::new(yaw, pitch);
    let subject_id = (index % spec.n_subjects) + 1;

    let mut sample = GazeSample {
        image: render_face(spec, subject_id, gaze),
        gaze,
        attrs: Vec::new(),
        subject_id,
    };
    let mut crng = stream_rng(spec.seed, index as u64, STREAM_CORRUPT);
    for c in &spec.corruptions {
        let fire: f64 = crng.gen();
        if fire < c.probability {
            sample = corrupt(&sample, c.tag, c.severity, &mut crng)?;
        }
    }
    if sample.attrs.is_empty() {
        sample.attrs.push("clean".to_string());
    }
    Ok(sample)
}

/// Render the whole dataset described by the scene.
pub fn render_dataset(spec: &SceneSpec) -> Result<Vec<GazeSample>> {
    spec.validate()?;
    (0..spec.n_samples)
        .map(|i| render_sample(spec, i))
        .collect()
}

/// Split samples into (train, test) by subject id threshold: subjects
/// with id ≤ `max_train_id` train, the rest test.
pub fn split_by_subject(
    samples: Vec<GazeSample>,
    max_train_id: usize,
) -> (Vec<GazeSample>, Vec<GazeSample>) {
    samples
        .into_iter()
        .partition(|s| s.subject_id <= max_train_id)
}

const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "index,yaw,pitch,attrs,subject_id,image";

/// Write manifest + one 8-bit RGB PNG per sample. Pixels are quantized
/// to 1/255 steps; labels and attrs are written losslessly.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[GazeSample]) -> Result<()> {
    let dir = dir.as_ref();
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(img_dir.display().to_string(), e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
        let mut buf = Vec::with_capacity(3 * h * w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    buf.push((s.image[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        let img =
            image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image");
        let rel = format!("images/{i:05}.png");
        let path = dir.join(&rel);
        img.save(&path)
            .map_err(|e| Error::invalid(format!("png write {}: {e}", path.display())))?;
        manifest.push_str(&format!(
            "{i},{},{},{},{},{rel}\n",
            s.gaze.yaw,
            s.gaze.pitch,
            s.attrs.join("+"),
            s.subject_id
        ));
    }
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.display().to_string(), e))
}

fn record_err(record: usize, message: impl Into<String>) -> Error {
    Error::Record {
        record,
        message: message.into(),
    }
}

/// Read a dataset directory back. Malformed manifest rows and broken
/// images are reported with their record index.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<GazeSample>> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        other => {
            return Err(record_err(
                0,
                format!("bad manifest header: {:?}", other.unwrap_or("")),
            ))
        }
    }
    let mut samples = Vec::new();
    for (rec, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(record_err(
                rec,
                format!("expected 6 fields, got {}", fields.len()),
            ));
        }
        let yaw: f64 = fields[1]
            .parse()
            .map_err(|e| record_err(rec, format!("yaw: {e}")))?;
        let pitch: f64 = fields[2]
            .parse()
            .map_err(|e| record_err(rec, format!("pitch: {e}")))?;
        let attrs: Vec<String> = if fields[3].is_empty() {
            Vec::new()
        } else {
            fields[3].split('+').map(|s| s.to_string()).collect()
        };
        let subject_id: usize = fields[4]
            .parse()
            .map_err(|e| record_err(rec, format!("subject_id: {e}")))?;
        let ipath = dir.join(fields[5]);
        let img = image::open(&ipath)
            .map_err(|e| record_err(rec, format!("image {}: {e}", ipath.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Array3::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    data[[c, y, x]] = p.0[c] as f64 / 255.0;
                }
            }
        }
        samples.push(GazeSample {
            image: data,
            gaze: GazeAngles::new(yaw, pitch),
            attrs,
            subject_id,
        });
    }
    Ok(samples)
}

/// Brute-force template-matching decoder: for each eye, slide an
/// anti-aliased iris/pupil darkness template over sub-pixel offsets and
/// take the correlation argmax, then invert the displacement law. Exists
/// to prove the label is recoverable from pixels alone.
pub fn estimate_gaze_template(image: &Array3<f64>, spec: &SceneSpec) -> GazeAngles {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let geom = FaceGeometry::for_size(h, w);

    // Darkness relative to sclera. The template below predicts this
    // quantity up to a subject-dependent scale, which the argmax ignores.
    let darkness = |y: usize, x: usize| -> f64 {
        let lum = (image[[0, y, x]] + image[[1, y, x]] + image[[2, y, x]]) / 3.0;
        (0.90 - lum).max(0.0)
    };

    // Relative darkness of the pupil layer over the iris layer for the
    // canonical palette; subject jitter only rescales the shape slightly.
    const PUPIL_WEIGHT: f64 = 0.175;

    let score_eye = |eye_cx: f64, dx: f64, dy: f64| -> f64 {
        let icx = eye_cx + dx;
        let icy = geom.eye_y + dy;
        let y0 = (geom.eye_y - geom.eye_ry - 2.0).floor().max(0.0) as usize;
        let y1 = ((geom.eye_y + geom.eye_ry + 3.0).ceil() as usize).min(h);
        let x0 = (eye_cx - geom.eye_rx - 2.0).floor().max(0.0) as usize;
        let x1 = ((eye_cx + geom.eye_rx + 3.0).ceil() as usize).min(w);
        let mut s = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let eye = ellipse_cov(px, py, eye_cx, geom.eye_y, geom.eye_rx, geom.eye_ry);
                if eye > 0.05 {
                    let t = disk_cov(px, py, icx, icy, geom.iris_r)
                        + PUPIL_WEIGHT * disk_cov(px, py, icx, icy, geom.iris_r * 0.45);
                    s += t * eye * darkness(y, x);
                }
            }
        }
        s
    };

    let score = |dx: f64, dy: f64| -> f64 {
        score_eye(geom.left_eye_x, dx, dy) + score_eye(geom.right_eye_x, dx, dy)
    };

    // Coarse-to-fine argmax over both eyes jointly (the offset is shared).
    let search = |step: f64, cx0: f64, cy0: f64, half: f64| -> (f64, f64) {
        let mut best = (cx0, cy0);
        let mut best_s = f64::NEG_INFINITY;
        let n = (2.0 * half / step).round() as i64;
        for iy in 0..=n {
            let dy = cy0 - half + iy as f64 * step;
            if dy.abs() > geom.amp_y + 0.75 {
                continue;
            }
            for ix in 0..=n {
                let dx = cx0 - half + ix as f64 * step;
                if dx.abs() > geom.amp_x + 0.75 {
                    continue;
                }
                let s = score(dx, dy);
                if s > best_s {
                    best_s = s;
                    best = (dx, dy);
                }
            }
        }
        best
    };

    let coarse = search(0.5, 0.0, 0.0, geom.amp_x + 0.5);
    let fine = search(0.05, coarse.0, coarse.1, 0.6);

    // One parabolic refinement per axis around the grid argmax.
    let refine = |dx: f64, dy: f64| -> (f64, f64) {
        let step = 0.05;
        let peak = |sm: f64, s0: f64, sp: f64| -> f64 {
            let denom = sm - 2.0 * s0 + sp;
            if denom >= -1e-12 {
                return 0.0;
            }
            (0.5 * (sm - sp) / denom).clamp(-1.0, 1.0) * step
        };
        let ox = peak(score(dx - step, dy), score(dx, dy), score(dx + step, dy));
        let oy = peak(score(dx, dy - step), score(dx, dy), score(dx, dy + step));
        (dx + ox, dy + oy)
    };
    let (bx, by) = refine(fine.0, fine.1);
    let _ = spec;
    GazeAngles::new(
        (bx / geom.amp_x).clamp(-1.0, 1.0).asin(),
        (by / geom.amp_y).clamp(-1.0, 1.0).asin(),
    )
}

/// Count of samples per attribute, for reporting.
pub fn attr_histogram(samples: &[GazeSample]) -> BTreeMap<String, usize> {
    let mut map = BTreeMap::new();
    for s in samples {
        for a in &s.attrs {
            *map.entry(a.clone()).or_insert(0) += 1;
        }
    }
    map
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;
    use crate::fam::spectrum_stability;
    use crate::geometry::angular_error_between_angles;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("lisa-synth-tests").join(name);
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn small_spec() -> SceneSpec {
        SceneSpec {
            n_samples: 8,
            n_subjects: 4,
            seed: 11,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn straight_gaze_centers_the_irises() {
        let spec = small_spec();
        let img = render_face(&spec, 1, GazeAngles::new(0.0, 0.0));
        let g = FaceGeometry::for_size(64, 64);
        assert_eq!(g.iris_offset(GazeAngles::new(0.0, 0.0)), (0.0, 0.0));
        let est = estimate_gaze_template(&img, &spec);
        let err = angular_error_between_angles(GazeAngles::new(0.0, 0.0), est).unwrap();
        assert!(err < 0.75, "decoded {est:?} -> {err} deg");
    }

    #[test]
    fn rendering_is_bit_deterministic() {
        let spec = small_spec();
        let a = render_sample(&spec, 3).unwrap();
        let b = render_sample(&spec, 3).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.gaze, b.gaze);
        assert_eq!(a.attrs, b.attrs);
        for (x, y) in a.image.iter().zip(b.image.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let mut spec = small_spec();
        spec.corruptions = CorruptTag::ALL
            .iter()
            .map(|&tag| CorruptionSpec {
                tag,
                severity: 1.0,
                probability: 1.0,
            })
            .collect();
        for i in 0..8 {
            let s = render_sample(&spec, i).unwrap();
            assert!(
                s.image.iter().all(|v| (0.0..=1.0).contains(v)),
                "sample {i}"
            );
        }
    }

    #[test]
    fn subject_ids_cycle_and_split() {
        let spec = small_spec();
        let samples = render_dataset(&spec).unwrap();
        let ids: Vec<usize> = samples.iter().map(|s| s.subject_id).collect();
        assert_eq!(ids, vec![1, 2, 3, 4, 1, 2, 3, 4]);
        let (train, test) = split_by_subject(samples, 2);
        assert_eq!(train.len(), 4);
        assert_eq!(test.len(), 4);
        assert!(train.iter().all(|s| s.subject_id <= 2));
        assert!(test.iter().all(|s| s.subject_id > 2));
    }

    #[test]
    fn template_oracle_recovers_labels_small_batch() {
        // Full 512-sample run lives in the acceptance gate; this is the
        // fast regression guard.
        let spec = SceneSpec {
            n_samples: 24,
            seed: 19,
            ..SceneSpec::default()
        };
        let mut total = 0.0;
        for i in 0..spec.n_samples {
            let s = render_sample(&spec, i).unwrap();
            let est = estimate_gaze_template(&s.image, &spec);
            total += angular_error_between_angles(s.gaze, est).unwrap();
        }
        let mean = total / spec.n_samples as f64;
        assert!(mean < 2.0, "mean decode error {mean} deg");
    }

    #[test]
    fn severity_zero_changes_only_the_tag() {
        let spec = small_spec();
        let s = render_sample(&spec, 0).unwrap();
        let mut rng = stream_rng(1, 2, 3);
        for tag in CorruptTag::ALL {
            let c = corrupt(&s, tag, 0.0, &mut rng).unwrap();
            assert_eq!(c.gaze, s.gaze);
            assert!(c.attrs.contains(&tag.to_string()));
            for (a, b) in s.image.iter().zip(c.image.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{tag}");
            }
        }
    }

    #[test]
    fn corruption_never_touches_the_label() {
        let spec = small_spec();
        let s = render_sample(&spec, 1).unwrap();
        let mut rng = stream_rng(4, 5, 6);
        for tag in CorruptTag::ALL {
            for sev in [0.2, 0.7, 1.0] {
                let c = corrupt(&s, tag, sev, &mut rng).unwrap();
                assert_eq!(c.gaze, s.gaze);
                assert_eq!(c.subject_id, s.subject_id);
            }
        }
    }

    #[test]
    fn small_brightness_scale_keeps_spectrum_shape() {
        // Unclamped regime: max pixel ~0.93, k = 1.04 stays below 1.
        let spec = small_spec();
        let s = render_sample(&spec, 2).unwrap();
        assert!(s.image.iter().all(|v| *v < 0.96));
        let mut rng = stream_rng(7, 8, 9);
        let b = corrupt(&s, CorruptTag::Bright, 0.05, &mut rng).unwrap();
        let d = spectrum_stability(&s.image, &b.image).unwrap();
        assert!(d < 1e-12, "stability {d}");
    }

    #[test]
    fn mask_leaves_eye_regions_bit_identical() {
        let spec = small_spec();
        let s = render_sample(&spec, 3).unwrap();
        let mut rng = stream_rng(10, 11, 12);
        let m = corrupt(&s, CorruptTag::Mask, 0.8, &mut rng).unwrap();
        let r = canonical_regions(64, 64);
        for (y0, y1, x0, x1) in [r.left_eye, r.right_eye] {
            for y in y0..y1 {
                for x in x0..x1 {
                    for c in 0..3 {
                        assert_eq!(s.image[[c, y, x]].to_bits(), m.image[[c, y, x]].to_bits());
                    }
                }
            }
        }
        // Lower-face region must actually change.
        let (y0, y1, x0, x1) = r.lower_face;
        let mut changed = 0;
        let mut total = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                total += 1;
                if (0..3).any(|c| s.image[[c, y, x]] != m.image[[c, y, x]]) {
                    changed += 1;
                }
            }
        }
        assert!(
            changed as f64 > 0.8 * total as f64,
            "{changed}/{total} lower-face pixels changed"
        );
    }

    #[test]
    fn occluder_leaves_one_eye_mostly_clean() {
        let spec = small_spec();
        let r = canonical_regions(64, 64);
        for i in 0..50u64 {
            let s = render_sample(&spec, 4).unwrap();
            let mut rng = stream_rng(100 + i, 0, 0);
            let o = corrupt(&s, CorruptTag::Occluder, 1.0, &mut rng).unwrap();
            let clean_frac = |(y0, y1, x0, x1): (usize, usize, usize, usize)| -> f64 {
                let mut clean = 0;
                let mut total = 0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        total += 1;
                        if (0..3)
                            .all(|c| s.image[[c, y, x]].to_bits() == o.image[[c, y, x]].to_bits())
                        {
                            clean += 1;
                        }
                    }
                }
                clean as f64 / total as f64
            };
            let lf = clean_frac(r.left_eye);
            let rf = clean_frac(r.right_eye);
            assert!(lf.max(rf) >= 0.5, "trial {i}: left {lf:.2}, right {rf:.2}");
        }
    }

    #[test]
    fn unknown_tag_string_is_rejected() {
        assert!(CorruptTag::from_str("vignette").is_err());
    }

    #[test]
    fn dataset_round_trip_preserves_labels_and_pixels() {
        let mut spec = small_spec();
        spec.corruptions = vec![CorruptionSpec {
            tag: CorruptTag::Noise,
            severity: 0.4,
            probability: 0.5,
        }];
        let samples = render_dataset(&spec).unwrap();
        let dir = tmp("round-trip");
        write_dataset(&dir, &samples).unwrap();
        let back = read_dataset(&dir).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(back.iter()) {
            assert_eq!(a.gaze.yaw.to_bits(), b.gaze.yaw.to_bits());
            assert_eq!(a.gaze.pitch.to_bits(), b.gaze.pitch.to_bits());
            assert_eq!(a.attrs, b.attrs);
            assert_eq!(a.subject_id, b.subject_id);
            for (x, y) in a.image.iter().zip(b.image.iter()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tmp("empty");
        write_dataset(&dir, &[]).unwrap();
        let back = read_dataset(&dir).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn corrupt_manifest_reports_record_index() {
        let spec = small_spec();
        let samples = render_dataset(&spec).unwrap();
        let dir = tmp("corrupt-manifest");
        write_dataset(&dir, &samples[..3]).unwrap();
        let mpath = dir.join("manifest.csv");
        let mut text = fs::read_to_string(&mpath).unwrap();
        // Break the yaw field of record 1 (the second data row).
        text = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                if i == 2 {
                    l.replacen(',', ",notafloat***", 1)
                } else {
                    l.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("\n");
        fs::write(&mpath, text).unwrap();
        match read_dataset(&dir).unwrap_err() {
            Error::Record { record, .. } => assert_eq!(record, 1),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn scene_spec_validation() {
        let mut s = SceneSpec::default();
        s.yaw_range = (-2.0, 2.0);
        assert!(s.validate().is_err());
        let mut s = SceneSpec::default();
        s.image_size = (8, 8);
        assert!(s.validate().is_err());
        let mut s = SceneSpec::default();
        s.corruptions = vec![CorruptionSpec {
            tag: CorruptTag::Noise,
            severity: 1.5,
            probability: 0.5,
        }];
        assert!(s.validate().is_err());
    }

    #[test]
    fn attrs_default_to_clean() {
        let spec = small_spec();
        let s = render_sample(&spec, 0).unwrap();
        assert_eq!(s.attrs, vec!["clean".to_string()]);
    }
}
