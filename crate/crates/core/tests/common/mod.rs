//! Oracles and fixtures shared by the integration tests. Everything here is
//! written from the model definition directly and deliberately avoids the
//! library's own objective and solver code, so agreement between the two is
//! meaningful.
#![allow(dead_code)]

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, Matrix2xX, Matrix3, Matrix3xX, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use sparsepose::synth;
use sparsepose::types::{
    CameraTrajectory, CoeffSequence, ModelParams, Pose2DSequence, PoseDictionary, SequenceEstimate,
    BOX_SIZE,
};

/// Writes a verdict line straight to the process stdout so it shows up in
/// the test log whether or not output capture is on.
pub fn verdict(name: &str, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(out, "[{tag}] {name}: {detail}");
    let _ = out.flush();
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent evaluation of the full penalized objective.
pub fn objective(
    atoms: &[Matrix3xX<f64>],
    coeffs: &DMatrix<f64>,
    camera: &CameraTrajectory,
    obs: &Pose2DSequence,
    params: &ModelParams,
) -> f64 {
    let n = coeffs.ncols();
    let mut data = 0.0;
    for t in 0..n {
        let mut shape = Matrix3xX::zeros(atoms[0].ncols());
        for (i, a) in atoms.iter().enumerate() {
            shape += a * coeffs[(i, t)];
        }
        let rotated = camera.rotations[t] * shape;
        for j in 0..obs.frames[t].ncols() {
            for row in 0..2 {
                let pred = rotated[(row, j)] + camera.translations[t][row];
                let e = obs.frames[t][(row, j)] - pred;
                data += e * e;
            }
        }
    }
    let l1: f64 = coeffs.iter().map(|v| v.abs()).sum();
    let mut coeff_smooth = 0.0;
    let mut rot_smooth = 0.0;
    for t in 1..n {
        for i in 0..coeffs.nrows() {
            let d = coeffs[(i, t)] - coeffs[(i, t - 1)];
            coeff_smooth += d * d;
        }
        for row in 0..2 {
            for col in 0..3 {
                let d = camera.rotations[t][(row, col)] - camera.rotations[t - 1][(row, col)];
                rot_smooth += d * d;
            }
        }
    }
    0.5 * params.nu * data
        + params.alpha * l1
        + 0.5 * params.beta * coeff_smooth
        + 0.5 * params.gamma * rot_smooth
}

pub fn estimate_objective(est: &SequenceEstimate, obs: &Pose2DSequence, params: &ModelParams) -> f64 {
    objective(&est.dictionary.atoms, &est.coeffs.values, &est.camera, obs, params)
}

/// Design matrix of one frame: column `i` is the projected atom `P R B_i`
/// flattened joint by joint.
fn design(atoms: &[Matrix3xX<f64>], rotation: &Matrix3<f64>) -> DMatrix<f64> {
    let p = atoms[0].ncols();
    DMatrix::from_fn(2 * p, atoms.len(), |r, i| {
        let (j, row) = (r / 2, r % 2);
        (0..3).map(|c| rotation[(row, c)] * atoms[i][(c, j)]).sum()
    })
}

/// Cyclic proximal coordinate descent on the coefficient subproblem (fixed
/// camera), run until no coordinate moves by more than `1e-15` relative.
pub fn coordinate_descent(
    atoms: &[Matrix3xX<f64>],
    camera: &CameraTrajectory,
    obs: &Pose2DSequence,
    params: &ModelParams,
    start: &DMatrix<f64>,
    max_sweeps: usize,
) -> DMatrix<f64> {
    let n = start.ncols();
    let k = start.nrows();
    let designs: Vec<DMatrix<f64>> = camera.rotations.iter().map(|r| design(atoms, r)).collect();
    let targets: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            let w = &obs.frames[t];
            (0..2 * w.ncols())
                .map(|r| w[(r % 2, r / 2)] - camera.translations[t][r % 2])
                .collect()
        })
        .collect();
    let mut c = start.clone();
    // residual M_t c_t - target_t, kept up to date
    let mut resid: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            (0..targets[t].len())
                .map(|r| (0..k).map(|i| designs[t][(r, i)] * c[(i, t)]).sum::<f64>() - targets[t][r])
                .collect()
        })
        .collect();
    for _ in 0..max_sweeps {
        let mut biggest: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for t in 0..n {
            for i in 0..k {
                let col = designs[t].column(i);
                let mut curv = params.nu * col.norm_squared();
                let mut grad = params.nu * col.iter().zip(&resid[t]).map(|(m, e)| m * e).sum::<f64>();
                let ci = c[(i, t)];
                if t > 0 {
                    curv += params.beta;
                    grad += params.beta * (ci - c[(i, t - 1)]);
                }
                if t + 1 < n {
                    curv += params.beta;
                    grad += params.beta * (ci - c[(i, t + 1)]);
                }
                if curv <= 0.0 {
                    continue;
                }
                let v = ci - grad / curv;
                let tau = params.alpha / curv;
                let next = if v > tau {
                    v - tau
                } else if v < -tau {
                    v + tau
                } else {
                    0.0
                };
                let delta = next - ci;
                if delta != 0.0 {
                    for (e, m) in resid[t].iter_mut().zip(col.iter()) {
                        *e += m * delta;
                    }
                    c[(i, t)] = next;
                }
                biggest = biggest.max(delta.abs());
                scale = scale.max(next.abs());
            }
        }
        if biggest <= 1e-15 * scale.max(1.0) {
            break;
        }
    }
    c
}

/// Gradient of the smooth part of the coefficient subproblem, from the
/// design matrices.
pub fn coeff_smooth_gradient(
    atoms: &[Matrix3xX<f64>],
    camera: &CameraTrajectory,
    obs: &Pose2DSequence,
    params: &ModelParams,
    c: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = c.ncols();
    let mut g = DMatrix::zeros(c.nrows(), n);
    for t in 0..n {
        let m = design(atoms, &camera.rotations[t]);
        let w = &obs.frames[t];
        let mut e = &m * c.column(t);
        for r in 0..e.len() {
            e[r] -= w[(r % 2, r / 2)] - camera.translations[t][r % 2];
        }
        let gt = m.transpose() * e * params.nu;
        g.column_mut(t).copy_from(&gt);
        if t > 0 {
            let d = (c.column(t) - c.column(t - 1)) * params.beta;
            let mut col = g.column_mut(t);
            col += d;
        }
        if t + 1 < n {
            let d = (c.column(t) - c.column(t + 1)) * params.beta;
            let mut col = g.column_mut(t);
            col += d;
        }
    }
    g
}

/// Largest violation of the lasso optimality conditions.
pub fn kkt(c: &DMatrix<f64>, grad: &DMatrix<f64>, alpha: f64) -> f64 {
    c.iter()
        .zip(grad.iter())
        .map(|(&x, &g)| {
            if x > 0.0 {
                (g + alpha).abs()
            } else if x < 0.0 {
                (g - alpha).abs()
            } else {
                (g.abs() - alpha).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// A random well-posed problem: Gaussian atoms, sparse coefficients, random
/// cameras and noisy projections centered in the box.
pub struct RandomProblem {
    pub truth: SequenceEstimate,
    pub obs: Pose2DSequence,
}

pub fn random_problem(seed: u64, n: usize, p: usize, k: usize, noise: f64) -> RandomProblem {
    let dict = Arc::new(synth::random_dictionary(p, k, seed).unwrap());
    let mut r = rng(seed.wrapping_mul(7919).wrapping_add(1));
    let mut coeffs = DMatrix::zeros(k, n);
    for i in 0..k.min(4) {
        let base = r.random_range(0.5..1.5) * 0.3 * BOX_SIZE;
        for t in 0..n {
            coeffs[(i, t)] = base * (1.0 + 0.02 * t as f64);
        }
    }
    let rotations: Vec<Matrix3<f64>> = (0..n).map(|_| synth::random_rotation(&mut r)).collect();
    let translations = vec![Vector2::repeat(0.5 * BOX_SIZE); n];
    let camera = CameraTrajectory {
        rotations,
        translations,
    };
    let truth = SequenceEstimate::new(CoeffSequence { values: coeffs }, camera, dict).unwrap();
    let gauss = Normal::new(0.0, noise.max(0.0)).unwrap();
    let obs = Pose2DSequence::new(
        (0..n)
            .map(|t| {
                let w = truth.project(t).unwrap();
                w.map(|v| v + if noise > 0.0 { gauss.sample(&mut r) } else { 0.0 })
            })
            .collect(),
    );
    RandomProblem { truth, obs }
}

/// Random coefficients and cameras for the same dictionary.
pub fn random_estimate(seed: u64, like: &SequenceEstimate, coeff_std: f64) -> SequenceEstimate {
    let mut r = rng(seed);
    let gauss = Normal::new(0.0, coeff_std).unwrap();
    let k = like.coeffs.atom_count();
    let n = like.coeffs.frame_count();
    let coeffs = DMatrix::from_fn(k, n, |_, _| gauss.sample(&mut r));
    let camera = CameraTrajectory {
        rotations: (0..n).map(|_| synth::random_rotation(&mut r)).collect(),
        translations: (0..n)
            .map(|_| Vector2::new(r.random_range(0.3..0.7), r.random_range(0.3..0.7)) * BOX_SIZE)
            .collect(),
    };
    SequenceEstimate::new(CoeffSequence { values: coeffs }, camera, like.dictionary.clone()).unwrap()
}

/// Posterior mean of one joint computed by brute-force summation in the
/// plain (not log-shifted) domain; fine for moderate precisions.
pub fn grid_posterior_mean(
    map: &[f64],
    centers: &[Vector2<f64>],
    mean: &Vector2<f64>,
    nu: f64,
) -> (Vector2<f64>, Vec<f64>) {
    let weights: Vec<f64> = map
        .iter()
        .zip(centers)
        .map(|(h, u)| h * (-0.5 * nu * (u - mean).norm_squared()).exp())
        .collect();
    let z: f64 = weights.iter().sum();
    let posterior: Vec<f64> = weights.iter().map(|w| w / z).collect();
    let m = posterior
        .iter()
        .zip(centers)
        .fold(Vector2::zeros(), |acc, (p, u)| acc + u * *p);
    (m, posterior)
}

pub fn max_abs(m: &Matrix2xX<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// Rotation angle between two rotation matrices, computed from the trace.
pub fn angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

pub fn single_atom_dictionary(shape: &Matrix3xX<f64>) -> (Arc<PoseDictionary>, f64) {
    let norm = shape.norm();
    let skeleton = sparsepose::types::SkeletonSpec::chain(shape.ncols());
    (
        Arc::new(PoseDictionary::normalized(vec![shape.clone()], skeleton).unwrap()),
        norm,
    )
}
