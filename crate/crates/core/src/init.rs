//! Per-frame starting estimates.
//!
//! Each frame alternates a camera fit against the current reconstruction
//! with a ridge-regularized least-squares fit of the coefficients; the
//! translation is eliminated by centering. The first camera comes from
//! orthographic Procrustes against the dictionary mean pose, later rounds
//! polish the rotation on the exact orthographic residual, and a joint
//! damped Gauss-Newton pass over rotation and coefficients finishes the
//! run. The heat-map variant reads argmax locations and reweights joints
//! with Huber weights to damp outliers.
//!
//! The fit is non-convex, so each frame is also started from rotations
//! spread over SO(3). Depth-mirrored solutions are folded onto one branch,
//! the distinct optima of every frame are kept as candidates, and one per
//! frame is chosen by dynamic programming over the sequence, scoring each
//! candidate by its data and sparsity costs and each consecutive pair by the
//! temporal smoothness penalties.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{
    DMatrix, DVector, Matrix2xX, Matrix3, Matrix3xX, Quaternion, UnitQuaternion, Vector2, Vector3,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3;
use crate::types::{
    CameraTrajectory, CoeffSequence, HeatMapStack, Pose2DSequence, PoseDictionary,
    ModelParams, SequenceEstimate, BOX_SIZE,
};
use crate::validate::Validate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub inner_rounds: usize,
    /// Huber threshold on per-joint residuals in box units (0.05 of the box side).
    pub robust_delta: f64,
    pub ridge: f64,
    /// Starting camera rotations per frame, spread evenly over SO(3), on top
    /// of the Procrustes fit of the mean pose.
    pub restarts: usize,
    /// Distinct per-frame optima passed to the sequence selection. With 1,
    /// every frame keeps its own cheapest fit.
    pub candidates: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            inner_rounds: 5,
            robust_delta: 0.05 * BOX_SIZE,
            ridge: 1e-4,
            restarts: 8,
            candidates: 4,
        }
    }
}

impl InitConfig {
    pub fn check(&self) -> Result<()> {
        if self.inner_rounds == 0 {
            return Err(Error::InvalidParameter("inner_rounds must be at least 1".into()));
        }
        if self.restarts == 0 || self.candidates == 0 {
            return Err(Error::InvalidParameter(
                "restarts and candidates must be at least 1".into(),
            ));
        }
        if !(self.robust_delta > 0.0) {
            return Err(Error::InvalidParameter("robust_delta must be positive".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::InvalidParameter("ridge must be non-negative".into()));
        }
        Ok(())
    }
}

fn huber_weight(r: f64, delta: f64) -> f64 {
    if r <= delta {
        1.0
    } else {
        delta / r
    }
}

struct FrameFit {
    coeffs: DVector<f64>,
    rotation: Matrix3<f64>,
    translation: Vector2<f64>,
    /// Weighted squared residual plus the ridge penalty.
    cost: f64,
}

fn weighted_mean(w: &Matrix2xX<f64>, weights: &[f64]) -> Vector2<f64> {
    let total: f64 = weights.iter().sum();
    let mut acc = Vector2::zeros();
    for (j, col) in w.column_iter().enumerate() {
        acc += weights[j] * col;
    }
    acc / total
}

/// Ridge fit of the coefficients with the rotation fixed.
fn ridge_coeffs(
    t: usize,
    w: &Matrix2xX<f64>,
    rotation: &Matrix3<f64>,
    dict: &PoseDictionary,
    weights: &[f64],
    ridge: f64,
) -> Result<DVector<f64>> {
    let p = w.ncols();
    let k = dict.atom_count();
    let proj = rotation.fixed_rows::<2>(0).into_owned();
    let wc = weighted_mean(w, weights);
    let sqrt_w: Vec<f64> = weights.iter().map(|v| v.sqrt()).collect();
    let mut m = DMatrix::zeros(2 * p, k);
    for (i, b) in dict.atoms.iter().enumerate() {
        let pb = proj * b;
        let pc = weighted_mean(&pb, weights);
        for j in 0..p {
            m[(2 * j, i)] = sqrt_w[j] * (pb[(0, j)] - pc.x);
            m[(2 * j + 1, i)] = sqrt_w[j] * (pb[(1, j)] - pc.y);
        }
    }
    let rhs = DVector::from_fn(2 * p, |r, _| sqrt_w[r / 2] * (w[(r % 2, r / 2)] - wc[r % 2]));
    let mt = m.transpose();
    let mut normal = &mt * &m;
    for i in 0..k {
        normal[(i, i)] += ridge;
    }
    let mtb = &mt * rhs;
    match normal.clone().cholesky() {
        Some(ch) => Ok(ch.solve(&mtb)),
        None => normal.lu().solve(&mtb).ok_or(Error::RankDeficientFrame(t)),
    }
}

/// Gauss-Newton steps on the rotation per alternation round.
const ROTATION_POLISH_ITERS: usize = 20;
/// Levenberg-Marquardt steps of the joint polish after the alternation.
/// Exactly representable frames converge well within this; with an
/// overcomplete dictionary the polish otherwise creeps along a valley
/// shaped only by the ridge, which buys nothing the later solvers need.
const JOINT_POLISH_ITERS: usize = 30;

/// Weighted, centered copies of the observations and atoms. Centering with
/// the same weights eliminates the translation exactly.
struct Centered {
    obs: Matrix2xX<f64>,
    atoms: Vec<Matrix3xX<f64>>,
    sqrt_w: Vec<f64>,
}

impl Centered {
    fn new(w: &Matrix2xX<f64>, dict: &PoseDictionary, weights: &[f64]) -> Self {
        let total: f64 = weights.iter().sum();
        let center3 = |b: &Matrix3xX<f64>| {
            let mut m = Vector3::zeros();
            for (j, c) in b.column_iter().enumerate() {
                m += weights[j] * c;
            }
            m /= total;
            let mut out = b.clone();
            for mut c in out.column_iter_mut() {
                c -= m;
            }
            out
        };
        let mean = weighted_mean(w, weights);
        let mut obs = w.clone();
        for mut c in obs.column_iter_mut() {
            c -= mean;
        }
        Centered {
            obs,
            atoms: dict.atoms.iter().map(center3).collect(),
            sqrt_w: weights.iter().map(|v| v.sqrt()).collect(),
        }
    }

    fn shape(&self, coeffs: &DVector<f64>) -> Matrix3xX<f64> {
        let mut s = Matrix3xX::zeros(self.obs.ncols());
        for (a, c) in self.atoms.iter().zip(coeffs.iter()) {
            s += a * *c;
        }
        s
    }

    fn cost(&self, rotation: &Matrix3<f64>, coeffs: &DVector<f64>, ridge: f64) -> f64 {
        let e = &self.obs - rotation.fixed_rows::<2>(0) * self.shape(coeffs);
        let data: f64 = e
            .column_iter()
            .zip(&self.sqrt_w)
            .map(|(c, v)| v * v * c.norm_squared())
            .sum();
        data + ridge * coeffs.norm_squared()
    }
}

/// Relative cost decrease below which the joint polish stops.
const POLISH_REL_TOL: f64 = 1e-10;

/// Damped Gauss-Newton on rotation and coefficients together. The
/// alternation alone crawls when the coefficients absorb rotation error;
/// moving both at once removes that coupling. Only decreasing steps are
/// taken, so the result is never worse than the input.
fn joint_polish(
    centered: &Centered,
    rotation: Matrix3<f64>,
    coeffs: DVector<f64>,
    ridge: f64,
) -> (Matrix3<f64>, DVector<f64>) {
    let p = centered.obs.ncols();
    let k = coeffs.len();
    let (mut r, mut c) = (rotation, coeffs);
    let mut f = centered.cost(&r, &c, ridge);
    let mut lambda = 1e-6;
    for _ in 0..JOINT_POLISH_ITERS {
        let top = r.fixed_rows::<2>(0).into_owned();
        let shape = centered.shape(&c);
        let e = &centered.obs - top * &shape;
        let mut jac = DMatrix::zeros(2 * p, 3 + k);
        let mut res = DVector::zeros(2 * p);
        for j in 0..p {
            let v = centered.sqrt_w[j];
            let dr = top * so3::hat(&shape.column(j).into_owned());
            for row in 0..2 {
                res[2 * j + row] = v * e[(row, j)];
                for col in 0..3 {
                    jac[(2 * j + row, col)] = v * dr[(row, col)];
                }
            }
            for (i, a) in centered.atoms.iter().enumerate() {
                let pa = top * a.column(j);
                jac[(2 * j, 3 + i)] = -v * pa.x;
                jac[(2 * j + 1, 3 + i)] = -v * pa.y;
            }
        }
        // the ridge residuals sqrt(ridge) c_i enter the normal equations
        // as a diagonal and a gradient shift
        let jt = jac.transpose();
        let mut jtj = &jt * &jac;
        let mut jte = &jt * &res;
        for i in 0..k {
            jtj[(3 + i, 3 + i)] += ridge;
            jte[3 + i] += ridge * c[i];
        }
        if jte.norm() <= 1e-14 * (1.0 + f) {
            break;
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut damped = jtj.clone();
            for d in 0..3 + k {
                damped[(d, d)] += lambda * (jtj[(d, d)] + 1e-12);
            }
            let Some(ch) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = -ch.solve(&jte);
            let xi = Vector3::new(delta[0], delta[1], delta[2]);
            let rt = so3::project_to_so3(&(r * so3::exp(&xi)));
            let ct = &c + delta.rows(3, k);
            let ft = centered.cost(&rt, &ct, ridge);
            if ft < f {
                improved = f - ft > POLISH_REL_TOL * f;
                r = rt;
                c = ct;
                f = ft;
                lambda = (lambda * 0.1).max(1e-12);
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (r, c)
}

/// One run of the alternation from a starting camera rotation, finished by
/// a joint polish under the final weights.
fn alternate(
    t: usize,
    w: &Matrix2xX<f64>,
    start: &Matrix3<f64>,
    dict: &PoseDictionary,
    config: &InitConfig,
    robust: bool,
) -> Result<FrameFit> {
    let p = w.ncols();
    let mut weights = vec![1.0; p];
    let mut rotation = *start;
    let mut coeffs = DVector::zeros(dict.atom_count());
    for round in 0..config.inner_rounds {
        if round > 0 {
            let shape = dict.combine(coeffs.iter().copied());
            rotation = so3::refine_orthographic_rotation(
                w,
                &shape,
                Some(&weights),
                &rotation,
                ROTATION_POLISH_ITERS,
            );
        }
        coeffs = ridge_coeffs(t, w, &rotation, dict, &weights, config.ridge)?;
        if robust {
            let shape = dict.combine(coeffs.iter().copied());
            let resid = w - rotation.fixed_rows::<2>(0) * &shape;
            let translation = weighted_mean(&resid, &weights);
            weights = resid
                .column_iter()
                .map(|c| huber_weight((c - translation).norm(), config.robust_delta))
                .collect();
        }
    }
    let centered = Centered::new(w, dict, &weights);
    let (rotation, coeffs) = joint_polish(&centered, rotation, coeffs, config.ridge);
    let cost = centered.cost(&rotation, &coeffs, config.ridge);
    let shape = dict.combine(coeffs.iter().copied());
    let translation = weighted_mean(&(w - rotation.fixed_rows::<2>(0) * &shape), &weights);
    Ok(FrameFit {
        coeffs,
        rotation,
        translation,
        cost,
    })
}

/// `count` rotations spread evenly over SO(3) (super-Fibonacci spiral of
/// unit quaternions).
pub fn spread_rotations(count: usize) -> Vec<Matrix3<f64>> {
    const PHI: f64 = std::f64::consts::SQRT_2;
    const PSI: f64 = 1.533_751_168_755_204_3;
    (0..count)
        .map(|i| {
            let s = i as f64 + 0.5;
            let r = (s / count as f64).sqrt();
            let big = (1.0 - s / count as f64).sqrt();
            let a = 2.0 * PI * s / PHI;
            let b = 2.0 * PI * s / PSI;
            let q = UnitQuaternion::from_quaternion(Quaternion::new(
                big * b.cos(),
                r * a.sin(),
                r * a.cos(),
                big * b.sin(),
            ));
            q.to_rotation_matrix().into_inner()
        })
        .collect()
}

/// Weak perspective cannot tell a shape from its depth mirror:
/// `(R, c)` and `(diag(-1, -1, 1) R, -c)` project identically and cost the
/// same. Picks the branch whose shape correlates positively with the
/// dictionary mean pose so that every frame lands on the same side.
fn orient(fit: &mut FrameFit, dict: &PoseDictionary, mean: &Matrix3xX<f64>) {
    let shape = dict.combine(fit.coeffs.iter().copied());
    if shape.dot(mean) < 0.0 {
        fit.coeffs.neg_mut();
        for mut row in fit.rotation.row_iter_mut().take(2) {
            row.neg_mut();
        }
    }
}

/// Distinct local optima of one frame, cheapest first.
fn fit_frame(
    t: usize,
    w: &Matrix2xX<f64>,
    starts: &[Matrix3<f64>],
    dict: &PoseDictionary,
    config: &InitConfig,
    robust: bool,
) -> Result<Vec<FrameFit>> {
    let centroid = w.column_mean();
    let spread = w.column_iter().map(|c| (c - centroid).norm()).fold(0.0, f64::max);
    if spread < 1e-12 {
        return Err(Error::RankDeficientFrame(t));
    }
    let mut mean = dict.mean_pose();
    if mean.norm() < 1e-12 {
        mean = dict.atoms[0].clone();
    }
    let mut fits = Vec::with_capacity(starts.len() + 1);
    // the closed-form camera of the mean pose goes first so it wins ties
    let procrustes = so3::orthographic_procrustes(w, &mean, None);
    fits.push(alternate(t, w, &procrustes, dict, config, robust)?);
    for start in starts {
        fits.push(alternate(t, w, start, dict, config, robust)?);
    }
    for f in &mut fits {
        orient(f, dict, &mean);
    }
    fits.sort_by(|a, b| a.cost.total_cmp(&b.cost));
    let mut kept: Vec<FrameFit> = Vec::new();
    for f in fits {
        if kept.len() == config.candidates {
            break;
        }
        let duplicate = kept
            .iter()
            .any(|k| so3::geodesic_distance(&k.rotation, &f.rotation) < DISTINCT_ROTATION);
        if !duplicate {
            kept.push(f);
        }
    }
    Ok(kept)
}

/// Candidates closer than this geodesic distance (radians) are one optimum.
const DISTINCT_ROTATION: f64 = 0.1;

/// Picks one candidate per frame minimizing the data and sparsity costs plus
/// the temporal smoothness penalties between consecutive picks.
fn select_path(cands: &[Vec<FrameFit>], params: &ModelParams) -> Vec<usize> {
    let unary = |f: &FrameFit| 0.5 * params.nu * f.cost + params.alpha * f.coeffs.lp_norm(1);
    let pairwise = |a: &FrameFit, b: &FrameFit| {
        let dr = (a.rotation - b.rotation).fixed_rows::<2>(0).norm_squared();
        0.5 * params.beta * (&a.coeffs - &b.coeffs).norm_squared() + 0.5 * params.gamma * dr
    };
    let n = cands.len();
    let mut score: Vec<f64> = cands[0].iter().map(unary).collect();
    let mut back: Vec<Vec<usize>> = vec![Vec::new(); n];
    for t in 1..n {
        let mut next = Vec::with_capacity(cands[t].len());
        let mut from = Vec::with_capacity(cands[t].len());
        for b in &cands[t] {
            let mut best = (f64::INFINITY, 0);
            for (i, a) in cands[t - 1].iter().enumerate() {
                let v = score[i] + pairwise(a, b);
                if v < best.0 {
                    best = (v, i);
                }
            }
            next.push(best.0 + unary(b));
            from.push(best.1);
        }
        score = next;
        back[t] = from;
    }
    let mut last = 0;
    for (i, v) in score.iter().enumerate() {
        if *v < score[last] {
            last = i;
        }
    }
    let mut path = vec![0; n];
    path[n - 1] = last;
    for t in (1..n).rev() {
        path[t - 1] = back[t][path[t]];
    }
    path
}

fn init_sequence(
    obs: &Pose2DSequence,
    dict: Arc<PoseDictionary>,
    params: &ModelParams,
    config: &InitConfig,
    robust: bool,
) -> Result<SequenceEstimate> {
    obs.check()?;
    params.check()?;
    config.check()?;
    if obs.joint_count() != dict.joint_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} observed joints vs {} dictionary joints",
            obs.joint_count(),
            dict.joint_count()
        )));
    }
    let starts = spread_rotations(config.restarts);
    let cands: Vec<Vec<FrameFit>> = obs
        .frames
        .par_iter()
        .enumerate()
        .map(|(t, w)| fit_frame(t, w, &starts, &dict, config, robust))
        .collect::<Result<_>>()?;
    let path = select_path(&cands, params);
    let n = obs.len();
    let mut coeffs = DMatrix::zeros(dict.atom_count(), n);
    let mut camera = CameraTrajectory::identity(n);
    for (t, (c, &i)) in cands.iter().zip(&path).enumerate() {
        coeffs.set_column(t, &c[i].coeffs);
        camera.rotations[t] = c[i].rotation;
        camera.translations[t] = c[i].translation;
    }
    SequenceEstimate::new(CoeffSequence { values: coeffs }, camera, dict)
}

/// Initialization from known 2D poses.
pub fn init_given_2d(
    obs: &Pose2DSequence,
    dict: Arc<PoseDictionary>,
    params: &ModelParams,
    config: &InitConfig,
) -> Result<SequenceEstimate> {
    init_sequence(obs, dict, params, config, false)
}

/// [`init_given_2d`] with Huber-reweighted joints.
pub fn init_given_2d_robust(
    obs: &Pose2DSequence,
    dict: Arc<PoseDictionary>,
    params: &ModelParams,
    config: &InitConfig,
) -> Result<SequenceEstimate> {
    init_sequence(obs, dict, params, config, true)
}

/// Initialization from heat maps: argmax locations (lowest row-major index
/// on ties) fitted with Huber reweighting.
pub fn init_from_heatmaps(
    heatmaps: &HeatMapStack,
    dict: Arc<PoseDictionary>,
    params: &ModelParams,
    config: &InitConfig,
) -> Result<SequenceEstimate> {
    heatmaps.check()?;
    init_given_2d_robust(&heatmaps.argmax_poses(), dict, params, config)
}
