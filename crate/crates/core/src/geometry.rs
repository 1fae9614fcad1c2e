//! Gaze representations and evaluation metrics.
//!
//! Gaze is carried either as 2D spherical angles (yaw, pitch) or as a 3D
//! unit vector. The axis convention used everywhere in this crate is
//!
//! ```text
//! v = (-cos(pitch) * sin(yaw), -sin(pitch), -cos(pitch) * cos(yaw))
//! ```
//!
//! so that (yaw = 0, pitch = 0) looks along -z, positive yaw turns toward
//! -x, and positive pitch turns toward -y. Angles are radians internally;
//! degrees appear only at reporting boundaries.

use crate::error::{Error, Result};

/// Gaze as signed spherical angles, radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeAngles {
    pub yaw: f64,
    pub pitch: f64,
}

impl GazeAngles {
    pub fn new(yaw: f64, pitch: f64) -> Self {
        GazeAngles { yaw, pitch }
    }
}

/// Gaze as a 3D unit vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeVector3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl GazeVector3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        GazeVector3 { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    fn normalized(&self) -> Result<GazeVector3> {
        let n = self.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::invalid(format!(
                "cannot normalize gaze vector with norm {n}"
            )));
        }
        Ok(GazeVector3::new(self.x / n, self.y / n, self.z / n))
    }

    pub fn dot(&self, other: &GazeVector3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }
}

/// Convert spherical gaze angles to the unit-vector form.
pub fn angles_to_vector(g: GazeAngles) -> Result<GazeVector3> {
    if !g.yaw.is_finite() || !g.pitch.is_finite() {
        return Err(Error::invalid(format!(
            "non-finite gaze angles ({}, {})",
            g.yaw, g.pitch
        )));
    }
    Ok(GazeVector3::new(
        -g.pitch.cos() * g.yaw.sin(),
        -g.pitch.sin(),
        -g.pitch.cos() * g.yaw.cos(),
    ))
}

/// Convert a gaze vector back to spherical angles. The input is normalized
/// first, so any positive rescaling maps to the same angles.
pub fn vector_to_angles(v: GazeVector3) -> Result<GazeAngles> {
    let u = v.normalized()?;
    let pitch = (-u.y).clamp(-1.0, 1.0).asin();
    let yaw = (-u.x).atan2(-u.z);
    Ok(GazeAngles::new(yaw, pitch))
}

/// Angular error between two gaze vectors in degrees, range [0, 180].
/// Both inputs are normalized defensively, so the result is invariant to
/// positive rescaling of either argument.
pub fn angular_error_deg(v: &GazeVector3, v_hat: &GazeVector3) -> Result<f64> {
    let a = v.normalized()?;
    let b = v_hat.normalized()?;
    let cos = a.dot(&b).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees())
}

/// Angular error computed directly between two angle pairs.
pub fn angular_error_between_angles(g: GazeAngles, g_hat: GazeAngles) -> Result<f64> {
    let v = angles_to_vector(g)?;
    let v_hat = angles_to_vector(g_hat)?;
    angular_error_deg(&v, &v_hat)
}

/// Summary statistics over per-sample angular errors.
///
/// `std_deg` is the population standard deviation (divide by N). That
/// choice keeps the report invariant under dataset duplication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub mean_deg: f64,
    pub std_deg: f64,
    pub acc_lt_8deg: f64,
}

/// Threshold for the accuracy column, degrees.
pub const ACCURACY_THRESHOLD_DEG: f64 = 8.0;

impl MetricReport {
    /// One CSV row: `mean_deg,std_deg,acc_lt_8deg`.
    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.mean_deg, self.std_deg, self.acc_lt_8deg)
    }

    pub fn csv_header() -> &'static str {
        "mean_deg,std_deg,acc_lt_8deg"
    }
}

/// Compute mean error, error std-dev, and accuracy-below-8-degrees over
/// matched prediction/truth lists.
pub fn metric_suite(preds: &[GazeAngles], truths: &[GazeAngles]) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::invalid("metric_suite called with no samples"));
    }
    if preds.len() != truths.len() {
        return Err(Error::invalid(format!(
            "metric_suite length mismatch: {} predictions vs {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let mut errors = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(truths) {
        errors.push(angular_error_between_angles(*t, *p)?);
    }
    Ok(report_from_errors(&errors))
}

/// Build a MetricReport from precomputed per-sample angular errors.
pub fn report_from_errors(errors: &[f64]) -> MetricReport {
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    let hits = errors
        .iter()
        .filter(|e| **e < ACCURACY_THRESHOLD_DEG)
        .count();
    MetricReport {
        mean_deg: mean,
        std_deg: var.sqrt(),
        acc_lt_8deg: hits as f64 / n,
    }
}
