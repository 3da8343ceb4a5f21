//! EM over the whole sequence with the 2D joint locations as latent
//! variables.
//!
//! E-step: per joint and frame, the posterior over grid cells is the heat
//! map times the Gaussian observation model centered at the current model
//! projection; its mean replaces the 2D observation. M-step: block
//! coordinate descent on those expected locations, warm-started from the
//! previous estimate.

use log::{debug, warn};
use nalgebra::Vector2;
use rayon::prelude::*;
use serde::Serialize;

use crate::bcd::solve_bcd;
use crate::error::{ensure_dims, Result};
use crate::objective;
use crate::types::{HeatMapStack, ModelParams, Pose2D, Pose2DSequence, SequenceEstimate};
use crate::validate::Validate;

/// Posterior normalizers below this value (after the log-domain shift) are
/// treated as degenerate.
const MIN_NORMALIZER: f64 = 1e-300;

#[derive(Debug, Clone)]
pub struct ExpectedPoses {
    pub poses: Pose2DSequence,
    /// `(frame, joint)` pairs whose posterior was degenerate and fell back to
    /// the model projection.
    pub fallbacks: Vec<(usize, usize)>,
}

/// Posterior mean of one joint location over the grid cells.
///
/// Returns `None` when the posterior has no usable mass.
pub fn posterior_mean(
    map: &[f64],
    centers: &[Vector2<f64>],
    mean: &Vector2<f64>,
    nu: f64,
) -> Option<Vector2<f64>> {
    let mut max_log = f64::NEG_INFINITY;
    let logs: Vec<f64> = map
        .iter()
        .zip(centers)
        .map(|(&h, u)| {
            if h > 0.0 {
                let l = h.ln() - 0.5 * nu * (u - mean).norm_squared();
                max_log = max_log.max(l);
                l
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    if !max_log.is_finite() {
        return None;
    }
    let mut z = 0.0;
    let mut acc = Vector2::zeros();
    for (l, u) in logs.iter().zip(centers) {
        if l.is_finite() {
            let w = (l - max_log).exp();
            z += w;
            acc += w * u;
        }
    }
    if !(z >= MIN_NORMALIZER) {
        return None;
    }
    let m = acc / z;
    if m.iter().all(|v| v.is_finite()) {
        Some(m)
    } else {
        None
    }
}

fn check_heatmaps(heatmaps: &HeatMapStack, est: &SequenceEstimate) -> Result<()> {
    ensure_dims(heatmaps.frames == est.frame_count(), || {
        format!(
            "{} heat-map frames vs {} estimated frames",
            heatmaps.frames,
            est.frame_count()
        )
    })?;
    ensure_dims(heatmaps.joints == est.joint_count(), || {
        format!(
            "{} heat-map joints vs {} dictionary joints",
            heatmaps.joints,
            est.joint_count()
        )
    })
}

/// E-step with the list of degenerate joints.
pub fn expected_pose_detailed(
    heatmaps: &HeatMapStack,
    previous: &SequenceEstimate,
    nu: f64,
) -> Result<ExpectedPoses> {
    check_heatmaps(heatmaps, previous)?;
    let centers = heatmaps.grid.centers();
    let p = heatmaps.joints;
    let frames: Vec<(Pose2D, Vec<usize>)> = (0..heatmaps.frames)
        .into_par_iter()
        .map(|t| {
            let mu = previous.projection_of(t, &previous.shape(t));
            let mut out = mu.clone();
            let mut flagged = Vec::new();
            for j in 0..p {
                let m = Vector2::new(mu[(0, j)], mu[(1, j)]);
                match posterior_mean(heatmaps.map(t, j), &centers, &m, nu) {
                    Some(e) => out.set_column(j, &e),
                    None => flagged.push(j),
                }
            }
            (out, flagged)
        })
        .collect();
    let mut fallbacks = Vec::new();
    let mut poses = Vec::with_capacity(frames.len());
    for (t, (w, flagged)) in frames.into_iter().enumerate() {
        fallbacks.extend(flagged.into_iter().map(|j| (t, j)));
        poses.push(w);
    }
    if !fallbacks.is_empty() {
        warn!("{} joints fell back to the model projection", fallbacks.len());
    }
    Ok(ExpectedPoses {
        poses: Pose2DSequence::new(poses),
        fallbacks,
    })
}

/// `E[w_jt]` under the posterior `h_j(u) exp(-nu/2 ||u - mu_jt||^2) / Z`,
/// summed over cell centers.
pub fn expected_pose(
    heatmaps: &HeatMapStack,
    previous: &SequenceEstimate,
    nu: f64,
) -> Result<Pose2DSequence> {
    Ok(expected_pose_detailed(heatmaps, previous, nu)?.poses)
}

/// The parameter-dependent part of the expected penalized log-likelihood:
/// `-L(theta; E[W]) - R(theta)`.
pub fn q_value(
    est: &SequenceEstimate,
    expected: &Pose2DSequence,
    params: &ModelParams,
) -> Result<f64> {
    Ok(-objective::evaluate(est, expected, params)?.total)
}

#[derive(Debug, Clone, Serialize)]
pub struct EmReport {
    pub em_iterations: usize,
    /// Q value after each M-step.
    pub q_trace: Vec<f64>,
    /// Largest coordinate change of `E[W]` between successive E-steps.
    pub expected_pose_shift_trace: Vec<f64>,
    pub converged: bool,
    /// BCD cycles used by each M-step.
    pub bcd_iterations: Vec<usize>,
    pub fallback_joints: usize,
}

fn max_shift(a: &Pose2DSequence, b: &Pose2DSequence) -> f64 {
    a.frames
        .iter()
        .zip(&b.frames)
        .map(|(x, y)| (x - y).amax())
        .fold(0.0, f64::max)
}

/// Alternates E-steps and M-steps until the expected poses move by less than
/// `params.em_tol` between E-steps, or `params.em_max_iters` E-steps ran.
pub fn solve_em(
    heatmaps: &HeatMapStack,
    initial: &SequenceEstimate,
    params: &ModelParams,
) -> Result<(SequenceEstimate, Pose2DSequence, EmReport)> {
    params.check()?;
    initial.check()?;
    heatmaps.check()?;
    check_heatmaps(heatmaps, initial)?;

    let mut est = initial.clone();
    let mut report = EmReport {
        em_iterations: 0,
        q_trace: Vec::new(),
        expected_pose_shift_trace: Vec::new(),
        converged: false,
        bcd_iterations: Vec::new(),
        fallback_joints: 0,
    };
    let mut previous: Option<Pose2DSequence> = None;
    let mut expected;
    loop {
        report.em_iterations += 1;
        let e = expected_pose_detailed(heatmaps, &est, params.nu)?;
        report.fallback_joints += e.fallbacks.len();
        expected = e.poses;
        if let Some(prev) = &previous {
            let shift = max_shift(prev, &expected);
            report.expected_pose_shift_trace.push(shift);
            debug!("em iteration {}: shift {shift:.3e}", report.em_iterations);
            if shift < params.em_tol {
                report.converged = true;
                break;
            }
        }
        if report.em_iterations >= params.em_max_iters {
            break;
        }
        let (next, bcd) = solve_bcd(&est, &expected, params)?;
        report.bcd_iterations.push(bcd.iterations);
        report.q_trace.push(q_value(&next, &expected, params)?);
        est = next;
        previous = Some(expected.clone());
    }
    if !report.converged {
        warn!(
            "EM stopped after {} iterations without converging",
            report.em_iterations
        );
    }
    Ok((est, expected, report))
}
