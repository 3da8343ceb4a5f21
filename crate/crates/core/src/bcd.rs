//! Block coordinate descent over coefficients, rotations and translations
//! for fixed 2D observations.
//!
//! Each block update never increases the penalized objective, so the outer
//! objective trace is monotone.

use log::{debug, warn};
use nalgebra::{DMatrix, Matrix2xX, Matrix3, Matrix3xX, Vector2, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::apg::{self, ApgOptions, CoeffProblem, Grams, QuadraticL1};
use crate::error::{Error, Result};
use crate::objective::{self, check_dims};
use crate::so3;
use crate::types::{CameraTrajectory, CoeffSequence, ModelParams, Pose2DSequence, SequenceEstimate};
use crate::validate::Validate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Tolerance,
    MaxIters,
}

#[derive(Debug, Clone, Serialize)]
pub struct BcdReport {
    pub iterations: usize,
    /// Objective before the first cycle followed by the value after each cycle.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub termination_reason: Termination,
    /// Rotation updates that ended on a failed line search.
    pub rotation_line_search_failures: usize,
}

fn ensure_finite(est: &SequenceEstimate, obs: &Pose2DSequence) -> Result<()> {
    if est.coeffs.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("coefficients"));
    }
    if obs.frames.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("observations"));
    }
    if est
        .camera
        .translations
        .iter()
        .any(|t| t.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite("translations"));
    }
    Ok(())
}

/// The convex coefficient subproblem for fixed rotations and translations.
pub fn coeff_subproblem(
    est: &SequenceEstimate,
    obs: &Pose2DSequence,
    params: &ModelParams,
) -> Result<CoeffProblem> {
    check_dims(est, obs)?;
    let basis = est.dictionary.flat_matrix();
    let n = est.frame_count();
    // Observations with the translation removed, lifted back through the
    // projection: column t holds P R_t transposed applied to every joint.
    let mut lifted = DMatrix::zeros(basis.nrows(), n);
    let mut sq = 0.0;
    let mut projectors = Vec::with_capacity(n);
    for t in 0..n {
        let proj = est.camera.projection(t);
        let tr = est.camera.translations[t];
        let mut col = lifted.column_mut(t);
        for (j, w) in obs.frames[t].column_iter().enumerate() {
            let d = w - tr;
            sq += d.norm_squared();
            col.fixed_rows_mut::<3>(3 * j).copy_from(&proj.tr_mul(&d));
        }
        projectors.push(proj.tr_mul(&proj));
    }
    let linear = basis.transpose() * lifted;
    Ok(CoeffProblem {
        grams: Grams::Projected { basis, projectors },
        linear,
        constant: 0.5 * params.nu * sq,
        scale: params.nu,
        beta: params.beta,
        alpha: params.alpha,
    })
}

/// Coefficient step: global minimizer of the convex subproblem by APG,
/// warm-started from the current coefficients. The current coefficients
/// are kept if APG fails to improve on them.
pub fn update_coeffs(
    est: &SequenceEstimate,
    obs: &Pose2DSequence,
    params: &ModelParams,
) -> Result<CoeffSequence> {
    ensure_finite(est, obs)?;
    let problem = coeff_subproblem(est, obs, params)?;
    let current = &est.coeffs.values;
    let result = apg::minimize(
        &problem,
        current,
        ApgOptions {
            tol: params.apg_tol,
            max_iters: params.apg_max_iters,
        },
    );
    debug!(
        "apg: {} iterations, kkt {:.3e}, converged {}",
        result.iterations, result.kkt_residual, result.converged
    );
    if result.objective <= problem.composite(current) {
        Ok(CoeffSequence { values: result.x })
    } else {
        Ok(est.coeffs.clone())
    }
}

/// Loss plus rotation smoothness as a function of the rotations, for fixed
/// shapes and translations.
struct RotationProblem<'a> {
    shapes: Vec<Matrix3xX<f64>>,
    obs: &'a Pose2DSequence,
    translations: &'a [Vector2<f64>],
    nu: f64,
    gamma: f64,
}

impl RotationProblem<'_> {
    fn residual(&self, t: usize, r: &Matrix3<f64>) -> Matrix2xX<f64> {
        let proj = r.fixed_rows::<2>(0);
        let mut e = &self.obs.frames[t] - proj * &self.shapes[t];
        for mut col in e.column_iter_mut() {
            col -= self.translations[t];
        }
        e
    }

    fn value(&self, rots: &[Matrix3<f64>]) -> f64 {
        let per: Vec<f64> = (0..rots.len())
            .into_par_iter()
            .map(|t| self.residual(t, &rots[t]).norm_squared())
            .collect();
        let loss = 0.5 * self.nu * per.iter().sum::<f64>();
        let smooth: f64 = (1..rots.len())
            .map(|t| (rots[t].fixed_rows::<2>(0) - rots[t - 1].fixed_rows::<2>(0)).norm_squared())
            .sum();
        loss + 0.5 * self.gamma * smooth
    }

    /// Body-frame gradient coordinates: the directional derivative along
    /// `R exp(xi^)` is `g . xi`.
    fn body_gradients(&self, rots: &[Matrix3<f64>]) -> Vec<Vector3<f64>> {
        let n = rots.len();
        (0..n)
            .into_par_iter()
            .map(|t| {
                let e = self.residual(t, &rots[t]);
                let mut top = -self.nu * e * self.shapes[t].transpose();
                if self.gamma != 0.0 {
                    let pt = rots[t].fixed_rows::<2>(0);
                    if t > 0 {
                        top += self.gamma * (pt - rots[t - 1].fixed_rows::<2>(0));
                    }
                    if t + 1 < n {
                        top += self.gamma * (pt - rots[t + 1].fixed_rows::<2>(0));
                    }
                }
                let mut g = Matrix3::zeros();
                g.fixed_rows_mut::<2>(0).copy_from(&top);
                2.0 * so3::vee_skew(&(rots[t].transpose() * g))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RotationUpdate {
    pub camera: CameraTrajectory,
    pub iterations: usize,
    /// Frobenius norm of the Riemannian gradient at the output.
    pub grad_norm: f64,
    pub line_search_failed: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// Rotation step: Riemannian gradient descent on SO(3)^n with Armijo
/// backtracking and the exponential-map retraction. Each frame's direction
/// is scaled by an estimate of its curvature, `nu ||S_t||^2 + 4 gamma`.
pub fn update_rotations(
    est: &SequenceEstimate,
    obs: &Pose2DSequence,
    params: &ModelParams,
) -> Result<RotationUpdate> {
    check_dims(est, obs)?;
    ensure_finite(est, obs)?;
    let n = est.frame_count();
    let problem = RotationProblem {
        shapes: (0..n).map(|t| est.shape(t)).collect(),
        obs,
        translations: &est.camera.translations,
        nu: params.nu,
        gamma: params.gamma,
    };
    let precond: Vec<f64> = problem
        .shapes
        .iter()
        .map(|s| params.nu * s.norm_squared() + 4.0 * params.gamma + 1e-12)
        .collect();

    let mut rots = est.camera.rotations.clone();
    let mut f = problem.value(&rots);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut failed = false;
    let mut grad_norm;
    loop {
        let g = problem.body_gradients(&rots);
        // ||R skew(R^T G)||_F = |g| / sqrt(2) in body coordinates
        grad_norm = (g.iter().map(|v| v.norm_squared()).sum::<f64>() * 0.5).sqrt();
        if grad_norm <= params.rot_grad_tol || iterations >= params.rot_max_iters {
            break;
        }
        iterations += 1;
        let dirs: Vec<Vector3<f64>> = g.iter().zip(&precond).map(|(v, h)| -v / *h).collect();
        let slope: f64 = g.iter().zip(&dirs).map(|(a, b)| a.dot(b)).sum();
        let mut accepted = None;
        let mut s = step;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<Matrix3<f64>> = rots
                .iter()
                .zip(&dirs)
                .map(|(r, d)| retract(r, &(d * s)))
                .collect();
            let ft = problem.value(&trial);
            if ft <= f + ARMIJO_C1 * s * slope {
                accepted = Some((trial, ft));
                break;
            }
            s *= 0.5;
        }
        match accepted {
            Some((trial, ft)) => {
                rots = trial;
                f = ft;
                step = (2.0 * s).min(4.0);
            }
            None => {
                failed = true;
                warn!("rotation line search failed after {MAX_BACKTRACKS} backtracks");
                break;
            }
        }
    }
    Ok(RotationUpdate {
        camera: CameraTrajectory {
            rotations: rots,
            translations: est.camera.translations.clone(),
        },
        iterations,
        grad_norm,
        line_search_failed: failed,
    })
}

/// `R exp(xi^)`, re-projected onto SO(3) to stop round-off drift.
fn retract(r: &Matrix3<f64>, xi: &Vector3<f64>) -> Matrix3<f64> {
    let m = r * so3::exp(xi);
    if crate::validate::orthogonality_error(&m) > 1e-12 {
        so3::project_to_so3(&m)
    } else {
        m
    }
}

/// Translation step: `T_t = rowmean(W_t - P R_t S_t)`.
pub fn update_translations(
    est: &SequenceEstimate,
    obs: &Pose2DSequence,
) -> Result<Vec<Vector2<f64>>> {
    check_dims(est, obs)?;
    Ok((0..est.frame_count())
        .map(|t| {
            let proj = est.camera.projection(t);
            (&obs.frames[t] - proj * est.shape(t)).column_mean()
        })
        .collect())
}

/// Cycles coefficient, rotation and translation updates until the relative
/// objective decrease falls below `params.bcd_tol` or `params.bcd_max_iters`
/// cycles have run.
pub fn solve_bcd(
    initial: &SequenceEstimate,
    obs: &Pose2DSequence,
    params: &ModelParams,
) -> Result<(SequenceEstimate, BcdReport)> {
    params.check()?;
    initial.check()?;
    check_dims(initial, obs)?;
    ensure_finite(initial, obs)?;

    let mut est = initial.clone();
    let mut f_prev = objective::evaluate(&est, obs, params)?.total;
    let mut trace = vec![f_prev];
    let mut termination = Termination::MaxIters;
    let mut failures = 0;
    let mut iterations = 0;
    while iterations < params.bcd_max_iters {
        iterations += 1;
        est.coeffs = update_coeffs(&est, obs, params)?;
        let rot = update_rotations(&est, obs, params)?;
        if rot.line_search_failed {
            failures += 1;
        }
        est.camera = rot.camera;
        est.camera.translations = update_translations(&est, obs)?;

        let f = objective::evaluate(&est, obs, params)?.total;
        trace.push(f);
        debug!("bcd iteration {iterations}: objective {f:.12e}");
        if f_prev - f <= params.bcd_tol * f_prev.abs() + OBJECTIVE_FLOOR {
            termination = Termination::Tolerance;
            break;
        }
        f_prev = f;
    }
    Ok((
        est,
        BcdReport {
            iterations,
            objective_trace: trace,
            converged: termination == Termination::Tolerance,
            termination_reason: termination,
            rotation_line_search_failures: failures,
        },
    ))
}

/// Absolute decrease below which an objective near zero counts as converged.
const OBJECTIVE_FLOOR: f64 = 1e-14;
