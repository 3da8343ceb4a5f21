//! Data loss, prior and their gradients. Every solver evaluates the
//! penalized objective through this module.
//!
//! Per-frame terms may be computed in parallel; reductions always run
//! sequentially in frame order so results are bit-reproducible.

use nalgebra::{DMatrix, Matrix2x3, Matrix2xX, Matrix3};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure_dims, Result};
use crate::types::{ModelParams, Pose2DSequence, SequenceEstimate};

/// The penalized objective split into its terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveBreakdown {
    pub loss: f64,
    pub l1_term: f64,
    pub coeff_smooth_term: f64,
    pub rot_smooth_term: f64,
    pub total: f64,
}

pub(crate) fn check_dims(est: &SequenceEstimate, obs: &Pose2DSequence) -> Result<()> {
    ensure_dims(obs.len() == est.frame_count(), || {
        format!("{} observed frames vs {} estimated frames", obs.len(), est.frame_count())
    })?;
    let p = est.joint_count();
    ensure_dims(obs.frames.iter().all(|w| w.ncols() == p), || {
        format!("observations do not all have {p} joints")
    })
}

/// `W_t - P R_t S_t - T_t 1^T` for every frame.
pub fn residuals(est: &SequenceEstimate, obs: &Pose2DSequence) -> Result<Vec<Matrix2xX<f64>>> {
    check_dims(est, obs)?;
    Ok((0..est.frame_count())
        .into_par_iter()
        .map(|t| &obs.frames[t] - est.projection_of(t, &est.shape(t)))
        .collect())
}

/// `(nu / 2) sum_t ||W_t - P R_t S_t - T_t 1^T||_F^2`.
pub fn data_loss(est: &SequenceEstimate, obs: &Pose2DSequence, nu: f64) -> Result<f64> {
    let per_frame: Vec<f64> = residuals(est, obs)?
        .par_iter()
        .map(|e| e.norm_squared())
        .collect();
    Ok(0.5 * nu * per_frame.iter().sum::<f64>())
}

pub fn l1_term(est: &SequenceEstimate, alpha: f64) -> f64 {
    alpha * est.coeffs.values.iter().map(|v| v.abs()).sum::<f64>()
}

/// `(beta / 2) sum_t ||c_{t+1} - c_t||^2`.
pub fn coeff_smooth_term(est: &SequenceEstimate, beta: f64) -> f64 {
    let c = &est.coeffs.values;
    let ss: f64 = (1..c.ncols())
        .map(|t| (c.column(t) - c.column(t - 1)).norm_squared())
        .sum();
    0.5 * beta * ss
}

/// `(gamma / 2) sum_t ||P R_{t+1} - P R_t||^2` on the 2x3 projection blocks.
pub fn rot_smooth_term(est: &SequenceEstimate, gamma: f64) -> f64 {
    let cam = &est.camera;
    let ss: f64 = (1..cam.len())
        .map(|t| (cam.projection(t) - cam.projection(t - 1)).norm_squared())
        .sum();
    0.5 * gamma * ss
}

/// `alpha ||C||_1 + (beta/2) ||grad_t C||^2 + (gamma/2) ||grad_t R||^2`.
pub fn prior(est: &SequenceEstimate, params: &ModelParams) -> f64 {
    l1_term(est, params.alpha)
        + coeff_smooth_term(est, params.beta)
        + rot_smooth_term(est, params.gamma)
}

pub fn evaluate(
    est: &SequenceEstimate,
    obs: &Pose2DSequence,
    params: &ModelParams,
) -> Result<ObjectiveBreakdown> {
    let loss = data_loss(est, obs, params.nu)?;
    let l1 = l1_term(est, params.alpha);
    let cs = coeff_smooth_term(est, params.beta);
    let rs = rot_smooth_term(est, params.gamma);
    Ok(ObjectiveBreakdown {
        loss,
        l1_term: l1,
        coeff_smooth_term: cs,
        rot_smooth_term: rs,
        total: loss + l1 + cs + rs,
    })
}

/// `beta * C D^T D` for the forward-difference operator `D`.
pub(crate) fn smoothness_gradient(c: &DMatrix<f64>, beta: f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(c.nrows(), c.ncols());
    if beta != 0.0 {
        add_smoothness(c, beta, &mut g);
    }
    g
}

/// Adds the gradient of `beta/2 sum_t ||c_{t+1} - c_t||^2` to `grad` and
/// returns the term's value.
pub(crate) fn add_smoothness(c: &DMatrix<f64>, beta: f64, grad: &mut DMatrix<f64>) -> f64 {
    let k = c.nrows();
    let cs = c.as_slice();
    let gs = grad.as_mut_slice();
    let mut ss = 0.0;
    for t in 1..c.ncols() {
        for i in 0..k {
            let d = cs[t * k + i] - cs[(t - 1) * k + i];
            ss += d * d;
            gs[t * k + i] += beta * d;
            gs[(t - 1) * k + i] -= beta * d;
        }
    }
    0.5 * beta * ss
}

/// Gradient of the data loss plus coefficient smoothness with respect to
/// `C`. The L1 term is excluded; solvers handle it proximally.
pub fn grad_coeffs(
    est: &SequenceEstimate,
    obs: &Pose2DSequence,
    params: &ModelParams,
) -> Result<DMatrix<f64>> {
    let res = residuals(est, obs)?;
    let dict = &est.dictionary;
    let cols: Vec<Vec<f64>> = (0..est.frame_count())
        .into_par_iter()
        .map(|t| {
            let proj = est.camera.projection(t);
            let pe = proj.transpose() * &res[t];
            dict.atoms
                .iter()
                .map(|b| -params.nu * b.dot(&pe))
                .collect()
        })
        .collect();
    let mut g = smoothness_gradient(&est.coeffs.values, params.beta);
    for (t, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            g[(i, t)] += v;
        }
    }
    Ok(g)
}

/// Euclidean gradient of loss + rotation smoothness with respect to each
/// full 3x3 rotation (third row always zero).
pub fn euclidean_grad_rotations(
    est: &SequenceEstimate,
    obs: &Pose2DSequence,
    params: &ModelParams,
) -> Result<Vec<Matrix3<f64>>> {
    let res = residuals(est, obs)?;
    let cam = &est.camera;
    let n = est.frame_count();
    Ok((0..n)
        .into_par_iter()
        .map(|t| {
            let s = est.shape(t);
            let mut top: Matrix2x3<f64> = -params.nu * &res[t] * s.transpose();
            if params.gamma != 0.0 {
                let pt = cam.projection(t);
                if t > 0 {
                    top += params.gamma * (pt - cam.projection(t - 1));
                }
                if t + 1 < n {
                    top += params.gamma * (pt - cam.projection(t + 1));
                }
            }
            let mut g = Matrix3::zeros();
            g.fixed_rows_mut::<2>(0).copy_from(&top);
            g
        })
        .collect())
}

/// Riemannian gradient on SO(3)^n: `R_t skew(R_t^T G_t)` per frame.
pub fn grad_rotations(
    est: &SequenceEstimate,
    obs: &Pose2DSequence,
    params: &ModelParams,
) -> Result<Vec<Matrix3<f64>>> {
    let eg = euclidean_grad_rotations(est, obs, params)?;
    Ok(eg
        .iter()
        .zip(&est.camera.rotations)
        .map(|(g, r)| {
            let a = r.transpose() * g;
            r * (0.5 * (a - a.transpose()))
        })
        .collect())
}
