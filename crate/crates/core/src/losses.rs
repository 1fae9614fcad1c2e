//! Composite training objective: smooth L1 on the two angle components,
//! angular error in degrees on the implied 3D vectors, and the weighted
//! semantic separation term.
//!
//! Forward values are exact; the angular term's backward evaluates the
//! arccos derivative at an input clamped to [−1+1e-7, 1−1e-7] so
//! gradients stay finite for parallel and antiparallel pairs.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angles_to_vector, angular_error_deg, GazeAngles, GazeVector3};
use crate::sdm::{separation_loss_with_grad, AnchorSet};

/// Clamp bound for the arccos input on the gradient path.
const ACOS_GRAD_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ang: f64,
    pub lambda_sep: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ang: 1.0,
            lambda_sep: 0.1,
            smooth_l1_beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_ang < 0.0 || self.lambda_sep < 0.0 {
            return Err(Error::config(format!(
                "loss weights must be nonnegative, got lambda_ang {} lambda_sep {}",
                self.lambda_ang, self.lambda_sep
            )));
        }
        if self.smooth_l1_beta.is_nan() || self.smooth_l1_beta <= 0.0 {
            return Err(Error::config(format!(
                "smooth_l1_beta must be positive, got {}",
                self.smooth_l1_beta
            )));
        }
        Ok(())
    }
}

/// Per-term loss values for one step (or a batch mean of steps).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub l1: f64,
    pub ang: f64,
    pub sep: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,total,l1,ang,sep";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{:.12e},{:.12e},{:.12e},{:.12e}",
            self.total, self.l1, self.ang, self.sep
        )
    }

    /// total = l1 + λ_ang·ang + λ_sep·sep within 1e-6.
    pub fn recomposes(&self, w: &LossWeights) -> bool {
        let want = self.l1 + w.lambda_ang * self.ang + w.lambda_sep * self.sep;
        (self.total - want).abs() <= 1e-6 * want.abs().max(1.0)
    }

    /// Element-wise mean of per-sample reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut acc = LossReport {
            total: 0.0,
            l1: 0.0,
            ang: 0.0,
            sep: 0.0,
        };
        for r in reports {
            acc.total += r.total;
            acc.l1 += r.l1;
            acc.ang += r.ang;
            acc.sep += r.sep;
        }
        LossReport {
            total: acc.total / n,
            l1: acc.l1 / n,
            ang: acc.ang / n,
            sep: acc.sep / n,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.l1.is_finite()
            && self.ang.is_finite()
            && self.sep.is_finite()
    }
}

fn huber(e: f64, beta: f64) -> f64 {
    if e.abs() <= beta {
        0.5 * e * e / beta
    } else {
        e.abs() - 0.5 * beta
    }
}

fn huber_grad(e: f64, beta: f64) -> f64 {
    if e.abs() <= beta {
        e / beta
    } else {
        e.signum()
    }
}

/// Smooth L1 over (yaw, pitch), averaged over the two components:
/// quadratic below `beta`, linear above.
pub fn smooth_l1(g: &GazeAngles, g_hat: &GazeAngles, beta: f64) -> Result<f64> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    if ![g.yaw, g.pitch, g_hat.yaw, g_hat.pitch]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::invalid("smooth_l1 requires finite angles"));
    }
    Ok((huber(g_hat.yaw - g.yaw, beta) + huber(g_hat.pitch - g.pitch, beta)) / 2.0)
}

/// Loss and its gradient with respect to `(g_hat.yaw, g_hat.pitch)`.
pub fn smooth_l1_grad(g: &GazeAngles, g_hat: &GazeAngles, beta: f64) -> Result<(f64, [f64; 2])> {
    let loss = smooth_l1(g, g_hat, beta)?;
    let gy = huber_grad(g_hat.yaw - g.yaw, beta) / 2.0;
    let gp = huber_grad(g_hat.pitch - g.pitch, beta) / 2.0;
    Ok((loss, [gy, gp]))
}

/// Angular error in degrees between two gaze vectors (forward value,
/// identical to the geometry metric).
pub fn angular_loss(v: &GazeVector3, v_hat: &GazeVector3) -> Result<f64> {
    angular_error_deg(v, v_hat)
}

/// Angular loss between the truth angles and the prediction, plus the
/// gradient with respect to `(g_hat.yaw, g_hat.pitch)` through the
/// angle-to-vector conversion. The arccos derivative is evaluated at the
/// clamped cosine so saturated pairs keep a finite gradient.
pub fn angular_loss_grad(g: &GazeAngles, g_hat: &GazeAngles) -> Result<(f64, [f64; 2])> {
    let v = angles_to_vector(*g)?;
    let v_hat = angles_to_vector(*g_hat)?;
    let loss = angular_error_deg(&v, &v_hat)?;

    let u = {
        let n = v.norm();
        GazeVector3::new(v.x / n, v.y / n, v.z / n)
    };
    let (sy, cy) = g_hat.yaw.sin_cos();
    let (sp, cp) = g_hat.pitch.sin_cos();
    // v̂ = (−cosθ sinφ, −sinθ, −cosθ cosφ), already unit norm.
    let c = u.dot(&v_hat);
    let c_cl = c.clamp(-1.0 + ACOS_GRAD_CLAMP, 1.0 - ACOS_GRAD_CLAMP);
    let dl_dc = -(180.0 / std::f64::consts::PI) / (1.0 - c_cl * c_cl).sqrt();

    // dv̂/dφ and dv̂/dθ.
    let dv_dyaw = GazeVector3::new(-cp * cy, 0.0, cp * sy);
    let dv_dpitch = GazeVector3::new(sp * sy, -cp, sp * cy);
    Ok((loss, [dl_dc * u.dot(&dv_dyaw), dl_dc * u.dot(&dv_dpitch)]))
}

/// Compose the full objective for one sample. `sdm` carries the gaze
/// embedding and anchor set when the semantic branch is active; the
/// ablated model passes `None` and the separation term is exactly zero.
pub fn total_loss(
    g: &GazeAngles,
    g_hat: &GazeAngles,
    sdm: Option<(&Array1<f64>, &AnchorSet)>,
    w: &LossWeights,
) -> Result<LossReport> {
    w.validate()?;
    let l1 = smooth_l1(g, g_hat, w.smooth_l1_beta)?;
    let v = angles_to_vector(*g)?;
    let v_hat = angles_to_vector(*g_hat)?;
    let ang = angular_loss(&v, &v_hat)?;
    let sep = match sdm {
        Some((e, anchors)) => separation_loss_with_grad(e, anchors)?.0,
        None => 0.0,
    };
    Ok(LossReport {
        total: l1 + w.lambda_ang * ang + w.lambda_sep * sep,
        l1,
        ang,
        sep,
    })
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck, init};
    use crate::sdm::{build_anchor_set, default_prompt_pool};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_prediction_is_zero_loss() {
        let g = GazeAngles::new(0.3, -0.2);
        assert_eq!(smooth_l1(&g, &g, 1.0).unwrap(), 0.0);
        let v = angles_to_vector(g).unwrap();
        assert_eq!(angular_loss(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn linear_branch_matches_definition() {
        let g = GazeAngles::new(0.0, 0.0);
        let g_hat = GazeAngles::new(5.0, -3.0);
        // Per component |e| − β/2, averaged: ((5−0.5)+(3−0.5))/2.
        let got = smooth_l1(&g, &g_hat, 1.0).unwrap();
        assert!((got - 3.5).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_matches_piecewise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        for _ in 0..50 {
            let g = GazeAngles::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let gh = GazeAngles::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let beta = rng.gen_range(0.1..2.0);
            let got = smooth_l1(&g, &gh, beta).unwrap();
            let oracle = |e: f64| {
                if e.abs() <= beta {
                    0.5 * e * e / beta
                } else {
                    e.abs() - 0.5 * beta
                }
            };
            let want = (oracle(gh.yaw - g.yaw) + oracle(gh.pitch - g.pitch)) / 2.0;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_l1_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        for _ in 0..20 {
            let g = GazeAngles::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let gh = GazeAngles::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let beta = 0.5;
            // Skip points near the quadratic/linear joint.
            if ((gh.yaw - g.yaw).abs() - beta).abs() < 0.01
                || ((gh.pitch - g.pitch).abs() - beta).abs() < 0.01
            {
                continue;
            }
            let (_, grad) = smooth_l1_grad(&g, &gh, beta).unwrap();
            let mut theta = vec![gh.yaw, gh.pitch];
            let num = gradcheck::central_diff(&mut theta, gradcheck::FD_STEP, &mut |p| {
                smooth_l1(&g, &GazeAngles::new(p[0], p[1]), beta).unwrap()
            });
            gradcheck::compare_grads(&grad, &num, gradcheck::FD_REL_TOL, gradcheck::FD_FLOOR)
                .unwrap();
        }
    }

    #[test]
    fn orthogonal_vectors_give_ninety_degrees() {
        let a = GazeVector3::new(1.0, 0.0, 0.0);
        let b = GazeVector3::new(0.0, 1.0, 0.0);
        assert!((angular_loss(&a, &b).unwrap() - 90.0).abs() < 1e-9);
    }

    #[test]
    fn angular_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let mut checked = 0;
        while checked < 20 {
            let g = GazeAngles::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.2..1.2));
            let gh = GazeAngles::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.2..1.2));
            let (loss, grad) = angular_loss_grad(&g, &gh).unwrap();
            // Near-parallel points have a kinked value function; skip.
            if !(1.0..=179.0).contains(&loss) {
                continue;
            }
            let mut theta = vec![gh.yaw, gh.pitch];
            let num = gradcheck::central_diff(&mut theta, gradcheck::FD_STEP, &mut |p| {
                let v = angles_to_vector(g).unwrap();
                let vh = angles_to_vector(GazeAngles::new(p[0], p[1])).unwrap();
                angular_loss(&v, &vh).unwrap()
            });
            gradcheck::compare_grads(&grad, &num, gradcheck::FD_REL_TOL, gradcheck::FD_FLOOR)
                .unwrap();
            checked += 1;
        }
    }

    #[test]
    fn near_degenerate_pairs_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        for i in 0..10_000 {
            let g = GazeAngles::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.2..1.2));
            // Alternate between near-parallel and near-antiparallel.
            let eps = 10f64.powf(rng.gen_range(-12.0..-4.0));
            let gh = if i % 2 == 0 {
                GazeAngles::new(g.yaw + eps, g.pitch - eps)
            } else {
                GazeAngles::new(g.yaw + std::f64::consts::PI - eps, -g.pitch + eps)
            };
            let (loss, grad) = angular_loss_grad(&g, &gh).unwrap();
            assert!(loss.is_finite(), "pair {i}: loss {loss}");
            assert!(
                grad[0].is_finite() && grad[1].is_finite(),
                "pair {i}: grad {grad:?}"
            );
        }
    }

    #[test]
    fn report_recomposes_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        let anchors = build_anchor_set(&default_prompt_pool(), 8).unwrap();
        let w = LossWeights {
            lambda_ang: 0.7,
            lambda_sep: 0.3,
            smooth_l1_beta: 1.0,
        };
        for _ in 0..20 {
            let g = GazeAngles::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.2..1.2));
            let gh = GazeAngles::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.2..1.2));
            let e: Array1<f64> = init::normal_array(&mut rng, 8, 1.0);
            let r = total_loss(&g, &gh, Some((&e, &anchors)), &w).unwrap();
            assert!(r.recomposes(&w));
            assert!(r.l1 >= 0.0 && r.ang >= 0.0 && r.sep >= 0.0);
            let want = r.l1 + 0.7 * r.ang + 0.3 * r.sep;
            assert!((r.total - want).abs() < 1e-6);
        }
    }

    #[test]
    fn perfect_prediction_with_orthogonal_embedding_is_zero_total() {
        let g = GazeAngles::new(0.2, -0.1);
        // Anchors along the first two axes, embedding along the third.
        let emb = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let anchors = crate::sdm::AnchorSet::new(emb, vec!["a".into(), "b".into()]).unwrap();
        let e = array![0.0, 0.0, 1.0];
        let r = total_loss(&g, &g, Some((&e, &anchors)), &LossWeights::default()).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn zero_lambda_sep_reduces_to_regression_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(85);
        let anchors = build_anchor_set(&default_prompt_pool(), 8).unwrap();
        let g = GazeAngles::new(0.4, 0.1);
        let gh = GazeAngles::new(-0.2, 0.3);
        let e: Array1<f64> = init::normal_array(&mut rng, 8, 1.0);
        let w = LossWeights {
            lambda_sep: 0.0,
            ..LossWeights::default()
        };
        let with_sdm = total_loss(&g, &gh, Some((&e, &anchors)), &w).unwrap();
        let without = total_loss(&g, &gh, None, &w).unwrap();
        assert_eq!(with_sdm.total, without.total);
        assert_eq!(with_sdm.total, with_sdm.l1 + w.lambda_ang * with_sdm.ang);
    }

    #[test]
    fn total_is_monotone_in_each_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(86);
        let anchors = build_anchor_set(&default_prompt_pool(), 8).unwrap();
        let g = GazeAngles::new(0.4, 0.1);
        let gh = GazeAngles::new(-0.2, 0.3);
        let e: Array1<f64> = init::normal_array(&mut rng, 8, 1.0);
        let mut prev_sep = f64::NEG_INFINITY;
        for ls in [0.0, 0.1, 0.5, 2.0] {
            let w = LossWeights {
                lambda_sep: ls,
                ..LossWeights::default()
            };
            let r = total_loss(&g, &gh, Some((&e, &anchors)), &w).unwrap();
            assert!(r.total >= prev_sep);
            prev_sep = r.total;
        }
        let mut prev_ang = f64::NEG_INFINITY;
        for la in [0.0, 0.5, 1.0, 3.0] {
            let w = LossWeights {
                lambda_ang: la,
                ..LossWeights::default()
            };
            let r = total_loss(&g, &gh, Some((&e, &anchors)), &w).unwrap();
            assert!(r.total >= prev_ang);
            prev_ang = r.total;
        }
    }

    #[test]
    fn weights_validation_rejects_bad_values() {
        let mut w = LossWeights::default();
        w.lambda_sep = -0.1;
        assert!(w.validate().is_err());
        let mut w = LossWeights::default();
        w.smooth_l1_beta = 0.0;
        assert!(w.validate().is_err());
    }

    #[test]
    fn report_mean_averages_each_term() {
        let a = LossReport {
            total: 2.0,
            l1: 1.0,
            ang: 0.5,
            sep: 0.25,
        };
        let b = LossReport {
            total: 4.0,
            l1: 3.0,
            ang: 1.5,
            sep: 0.75,
        };
        let m = LossReport::mean(&[a, b]);
        assert_eq!(m.total, 3.0);
        assert_eq!(m.l1, 2.0);
        assert_eq!(m.ang, 1.0);
        assert_eq!(m.sep, 0.5);
    }

    #[test]
    fn csv_row_has_header_arity() {
        let r = LossReport {
            total: 1.0,
            l1: 0.5,
            ang: 0.25,
            sep: 0.25,
        };
        let row = r.csv_row(7);
        assert_eq!(
            row.split(',').count(),
            LossReport::CSV_HEADER.split(',').count()
        );
        assert!(row.starts_with("7,"));
    }
}
