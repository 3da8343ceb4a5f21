//! Evaluation: root-aligned and Procrustes-aligned 3D errors, limb-length
//! rescaling, 2D error and PCK, and per-frame perspective refinement of the
//! camera with the 3D and 2D poses held fixed.

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix3xX, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::so3;
use crate::types::{
    Pose2D, Pose2DSequence, Pose3D, Pose3DSequence, SequenceEstimate, SkeletonSpec, BOX_SIZE,
};

fn check_pair3(a: &Pose3DSequence, b: &Pose3DSequence) -> Result<()> {
    ensure_dims(a.len() == b.len(), || format!("{} vs {} frames", a.len(), b.len()))?;
    ensure_dims(
        a.frames.iter().zip(&b.frames).all(|(x, y)| x.joint_count() == y.joint_count()),
        || "joint counts differ".to_string(),
    )
}

fn check_pair2(a: &Pose2DSequence, b: &Pose2DSequence) -> Result<()> {
    ensure_dims(a.len() == b.len(), || format!("{} vs {} frames", a.len(), b.len()))?;
    ensure_dims(
        a.frames.iter().zip(&b.frames).all(|(x, y)| x.ncols() == y.ncols()),
        || "joint counts differ".to_string(),
    )
}

/// Mean per-joint distance of one frame after moving both roots to the origin.
pub fn root_aligned_error(a: &Pose3D, b: &Pose3D, root: usize) -> Result<f64> {
    let p = a.joint_count();
    ensure_dims(p == b.joint_count() && root < p, || {
        format!("{} vs {} joints, root {root}", p, b.joint_count())
    })?;
    let ra = a.coords.column(root);
    let rb = b.coords.column(root);
    let total: f64 = (0..p)
        .map(|j| ((a.coords.column(j) - ra) - (b.coords.column(j) - rb)).norm())
        .sum();
    Ok(total / p as f64)
}

/// Per-frame root-aligned errors.
pub fn mpjpe_per_frame(est: &Pose3DSequence, truth: &Pose3DSequence, root: usize) -> Result<Vec<f64>> {
    check_pair3(est, truth)?;
    est.frames
        .iter()
        .zip(&truth.frames)
        .map(|(a, b)| root_aligned_error(a, b, root))
        .collect()
}

/// Mean per-joint position error after root alignment, over all frames.
pub fn mpjpe(est: &Pose3DSequence, truth: &Pose3DSequence, root: usize) -> Result<f64> {
    let per = mpjpe_per_frame(est, truth, root)?;
    Ok(mean(&per))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityTransform {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            rotation: Matrix3::identity(),
            scale: 1.0,
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Matrix3xX<f64>) -> Matrix3xX<f64> {
        let mut y = self.rotation * x * self.scale;
        for mut c in y.column_iter_mut() {
            c += self.translation;
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcrustesAlignment {
    pub transform: SimilarityTransform,
    /// Mean per-joint distance after alignment.
    pub mean_error: f64,
    /// Root mean squared per-joint distance after alignment.
    pub rms_error: f64,
}

/// Least-squares similarity transform carrying `a` onto `b`.
pub fn procrustes_align(a: &Pose3D, b: &Pose3D) -> Result<ProcrustesAlignment> {
    let p = a.joint_count();
    ensure_dims(p == b.joint_count(), || format!("{} vs {} joints", p, b.joint_count()))?;
    if p < 3 {
        return Err(Error::DegeneratePose(format!("{p} joints, need at least 3")));
    }
    let ca = a.centroid();
    let cb = b.centroid();
    let mut xa = a.coords.clone();
    let mut xb = b.coords.clone();
    for mut c in xa.column_iter_mut() {
        c -= ca;
    }
    for mut c in xb.column_iter_mut() {
        c -= cb;
    }
    let var_a = xa.norm_squared();
    let sv = xa.clone().svd(false, false).singular_values;
    let mut s_sorted: Vec<f64> = sv.iter().copied().collect();
    s_sorted.sort_by(|x, y| y.total_cmp(x));
    if !(s_sorted[0] > 0.0) || s_sorted[1] <= 1e-12 * s_sorted[0] {
        return Err(Error::DegeneratePose("source pose has rank below 2".into()));
    }

    let cov = &xb * xa.transpose();
    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * vt;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let scale = trace / var_a;
    let translation = cb - scale * rotation * ca;
    let transform = SimilarityTransform {
        rotation,
        scale,
        translation,
    };
    let aligned = transform.apply(&a.coords);
    let dists: Vec<f64> = (0..p)
        .map(|j| (aligned.column(j) - b.coords.column(j)).norm())
        .collect();
    Ok(ProcrustesAlignment {
        transform,
        mean_error: mean(&dists),
        rms_error: (dists.iter().map(|d| d * d).sum::<f64>() / p as f64).sqrt(),
    })
}

/// Per-frame Procrustes-aligned mean per-joint errors.
pub fn mpjpe_procrustes_per_frame(est: &Pose3DSequence, truth: &Pose3DSequence) -> Result<Vec<f64>> {
    check_pair3(est, truth)?;
    est.frames
        .par_iter()
        .zip(&truth.frames)
        .map(|(a, b)| procrustes_align(a, b).map(|r| r.mean_error))
        .collect()
}

pub fn mpjpe_procrustes(est: &Pose3DSequence, truth: &Pose3DSequence) -> Result<f64> {
    Ok(mean(&mpjpe_procrustes_per_frame(est, truth)?))
}

pub fn mean_limb_length(pose: &Pose3D, skeleton: &SkeletonSpec) -> f64 {
    if skeleton.limb_edges.is_empty() {
        return 0.0;
    }
    let total: f64 = skeleton
        .limb_edges
        .iter()
        .map(|&(a, b)| (pose.coords.column(a) - pose.coords.column(b)).norm())
        .sum();
    total / skeleton.limb_edges.len() as f64
}

/// Mean limb length averaged over a sequence.
pub fn sequence_mean_limb_length(poses: &Pose3DSequence, skeleton: &SkeletonSpec) -> f64 {
    let v: Vec<f64> = poses.frames.iter().map(|f| mean_limb_length(f, skeleton)).collect();
    mean(&v)
}

/// Scales `pose` uniformly about its root so the mean limb length equals
/// `target_mean_limb`.
pub fn limb_rescale(pose: &Pose3D, skeleton: &SkeletonSpec, target_mean_limb: f64) -> Result<Pose3D> {
    if !(target_mean_limb > 0.0 && target_mean_limb.is_finite()) {
        return Err(Error::InvalidParameter("target mean limb length must be positive".into()));
    }
    ensure_dims(skeleton.joint_count() == pose.joint_count(), || {
        format!("{} skeleton joints vs {} pose joints", skeleton.joint_count(), pose.joint_count())
    })?;
    let current = mean_limb_length(pose, skeleton);
    if !(current > 0.0) {
        return Err(Error::DegeneratePose("pose has zero mean limb length".into()));
    }
    let root = pose.coords.column(skeleton.root).into_owned();
    let f = target_mean_limb / current;
    let mut coords = pose.coords.clone();
    for mut c in coords.column_iter_mut() {
        let rel = (&c - root) * f;
        c.copy_from(&(root + rel));
    }
    Ok(Pose3D::new(coords))
}

pub fn limb_rescale_sequence(
    poses: &Pose3DSequence,
    skeleton: &SkeletonSpec,
    target_mean_limb: f64,
) -> Result<Pose3DSequence> {
    Ok(Pose3DSequence::new(
        poses
            .frames
            .iter()
            .map(|f| limb_rescale(f, skeleton, target_mean_limb))
            .collect::<Result<_>>()?,
    ))
}

fn joint_distances_px(est: &Pose2DSequence, truth: &Pose2DSequence, box_pixels: f64) -> Vec<Vec<f64>> {
    est.frames
        .iter()
        .zip(&truth.frames)
        .map(|(a, b)| {
            (0..a.ncols())
                .map(|j| (a.column(j) - b.column(j)).norm() * box_pixels / BOX_SIZE)
                .collect()
        })
        .collect()
}

/// Fraction of joints within `threshold_pixels` of the truth, with
/// the subject box scaled to a `box_pixels` square.
pub fn pck(est: &Pose2DSequence, truth: &Pose2DSequence, threshold_pixels: f64, box_pixels: f64) -> Result<f64> {
    check_pair2(est, truth)?;
    if !(threshold_pixels > 0.0) || !(box_pixels > 0.0) {
        return Err(Error::InvalidParameter("threshold and box size must be positive".into()));
    }
    let d = joint_distances_px(est, truth, box_pixels);
    let total: usize = d.iter().map(|f| f.len()).sum();
    if total == 0 {
        return Ok(0.0);
    }
    let hits = d.iter().flatten().filter(|&&x| x <= threshold_pixels).count();
    Ok(hits as f64 / total as f64)
}

/// Per-frame mean 2D distance in pixels of a `box_pixels` square.
pub fn mean_2d_error_per_frame(est: &Pose2DSequence, truth: &Pose2DSequence, box_pixels: f64) -> Result<Vec<f64>> {
    check_pair2(est, truth)?;
    Ok(joint_distances_px(est, truth, box_pixels).iter().map(|f| mean(f)).collect())
}

pub fn mean_2d_error(est: &Pose2DSequence, truth: &Pose2DSequence, box_pixels: f64) -> Result<f64> {
    Ok(mean(&mean_2d_error_per_frame(est, truth, box_pixels)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub box_pixels: f64,
    pub pck_threshold_pixels: f64,
    /// Rescale estimated poses to this mean limb length before scoring.
    pub target_mean_limb: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            box_pixels: 256.0,
            pck_threshold_pixels: 10.0,
            target_mean_limb: None,
        }
    }
}

/// 3D errors are in the units of the ground-truth poses.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mpjpe_root_aligned: f64,
    pub mpjpe_procrustes: f64,
    /// Mean RMS joint radius of the ground truth.
    pub truth_body_scale: f64,
    /// `mpjpe_procrustes / truth_body_scale`.
    pub relative_mpjpe_procrustes: f64,
    pub mean_2d_error: f64,
    pub pck: f64,
    pub box_pixels: f64,
    pub per_frame_root_aligned: Vec<f64>,
    pub per_frame_procrustes: Vec<f64>,
    pub per_frame_2d_error: Vec<f64>,
}

/// Rescales estimated limbs (when a target is set), then scores 3D and 2D
/// accuracy.
pub fn evaluate(
    est3d: &Pose3DSequence,
    truth3d: &Pose3DSequence,
    est2d: &Pose2DSequence,
    truth2d: &Pose2DSequence,
    skeleton: &SkeletonSpec,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let scored = match options.target_mean_limb {
        Some(target) => limb_rescale_sequence(est3d, skeleton, target)?,
        None => est3d.clone(),
    };
    let per_root = mpjpe_per_frame(&scored, truth3d, skeleton.root)?;
    let per_proc = mpjpe_procrustes_per_frame(&scored, truth3d)?;
    let per_2d = mean_2d_error_per_frame(est2d, truth2d, options.box_pixels)?;
    let scale = truth3d.mean_body_scale();
    let procrustes = mean(&per_proc);
    Ok(EvalReport {
        mpjpe_root_aligned: mean(&per_root),
        mpjpe_procrustes: procrustes,
        truth_body_scale: scale,
        relative_mpjpe_procrustes: if scale > 0.0 { procrustes / scale } else { f64::NAN },
        mean_2d_error: mean(&per_2d),
        pck: pck(est2d, truth2d, options.pck_threshold_pixels, options.box_pixels)?,
        box_pixels: options.box_pixels,
        per_frame_root_aligned: per_root,
        per_frame_procrustes: per_proc,
        per_frame_2d_error: per_2d,
    })
}

/// Pinhole intrinsics in box units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub principal: Vector2<f64>,
}

impl Intrinsics {
    pub fn project(&self, x: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(x.x / x.z, x.y / x.z) * self.focal + self.principal
    }

    pub fn project_points(&self, r: &Matrix3<f64>, t: &Vector3<f64>, s: &Matrix3xX<f64>) -> Pose2D {
        let mut w = Pose2D::zeros(s.ncols());
        for (j, c) in s.column_iter().enumerate() {
            w.set_column(j, &self.project(&(r * c + t)));
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PnpOptions {
    pub max_iters: usize,
    /// Stop when the update norm drops below this value.
    pub step_tol: f64,
}

impl Default for PnpOptions {
    fn default() -> Self {
        PnpOptions {
            max_iters: 100,
            step_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpFrame {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Sum of squared reprojection errors after each accepted step,
    /// starting with the initial value.
    pub cost_trace: Vec<f64>,
    pub converged: bool,
}

fn reprojection(
    intr: &Intrinsics,
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    s: &Matrix3xX<f64>,
    w: &Pose2D,
) -> Option<(f64, DVector<f64>)> {
    let p = s.ncols();
    let mut res = DVector::zeros(2 * p);
    for j in 0..p {
        let x = r * s.column(j) + t;
        if !(x.z > 0.0) {
            return None;
        }
        let u = intr.project(&x);
        res[2 * j] = u.x - w[(0, j)];
        res[2 * j + 1] = u.y - w[(1, j)];
    }
    Some((res.norm_squared(), res))
}

/// Damped Gauss-Newton on the perspective reprojection error over
/// `(rotation, translation)`. Rotation updates are `exp(omega^) R`.
/// Only steps that lower the cost are accepted.
pub fn pnp_refine(
    s: &Matrix3xX<f64>,
    w: &Pose2D,
    r0: &Matrix3<f64>,
    t0: &Vector3<f64>,
    intr: &Intrinsics,
    opts: &PnpOptions,
) -> Result<PnpFrame> {
    ensure_dims(s.ncols() == w.ncols(), || format!("{} 3D vs {} 2D joints", s.ncols(), w.ncols()))?;
    let p = s.ncols();
    let (mut cost, mut res) = reprojection(intr, r0, t0, s, w)
        .ok_or_else(|| Error::DegeneratePose("initial pose behind the camera".into()))?;
    let mut r = *r0;
    let mut t = *t0;
    let mut trace = vec![cost];
    let mut lambda = 1e-6;
    let mut converged = false;

    for _ in 0..opts.max_iters {
        if cost == 0.0 {
            converged = true;
            break;
        }
        let mut jac = DMatrix::zeros(2 * p, 6);
        for j in 0..p {
            let rs = r * s.column(j);
            let x = rs + t;
            let iz = 1.0 / x.z;
            let dpi = Matrix2x3::new(iz, 0.0, -x.x * iz * iz, 0.0, iz, -x.y * iz * iz) * intr.focal;
            let drot = dpi * (-so3::hat(&rs));
            for c in 0..3 {
                jac[(2 * j, c)] = drot[(0, c)];
                jac[(2 * j + 1, c)] = drot[(1, c)];
                jac[(2 * j, c + 3)] = dpi[(0, c)];
                jac[(2 * j + 1, c + 3)] = dpi[(1, c)];
            }
        }
        let jtj = jac.tr_mul(&jac);
        let jtr = jac.tr_mul(&res);
        let mut accepted = false;
        let mut small_step = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for i in 0..6 {
                a[(i, i)] += lambda * (1.0 + jtj[(i, i)]);
            }
            let Some(delta) = a.cholesky().map(|c| -c.solve(&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            if delta.norm() < opts.step_tol {
                small_step = true;
                break;
            }
            let omega = Vector3::new(delta[0], delta[1], delta[2]);
            let r_new = so3::project_to_so3(&(so3::exp(&omega) * r));
            let t_new = t + Vector3::new(delta[3], delta[4], delta[5]);
            match reprojection(intr, &r_new, &t_new, s, w) {
                Some((c, rn)) if c < cost => {
                    r = r_new;
                    t = t_new;
                    cost = c;
                    res = rn;
                    trace.push(c);
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = true;
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if small_step || !accepted {
            converged = true;
            break;
        }
    }
    Ok(PnpFrame {
        rotation: r,
        translation: t,
        cost_trace: trace,
        converged,
    })
}

/// Perspective camera per frame: rotation and 3-vector translation.
#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveTrajectory {
    pub rotations: Vec<Matrix3<f64>>,
    pub translations: Vec<Vector3<f64>>,
    /// Frames whose refinement failed and kept the initialization.
    pub fallback_frames: Vec<usize>,
}

fn rms_spread(points: impl Iterator<Item = Vector2<f64>> + Clone) -> f64 {
    let pts: Vec<Vector2<f64>> = points.collect();
    let n = pts.len().max(1) as f64;
    let c = pts.iter().sum::<Vector2<f64>>() / n;
    (pts.iter().map(|x| (x - c).norm_squared()).sum::<f64>() / n).sqrt()
}

/// Perspective translation matching a weak-perspective fit: depth from the
/// ratio of 3D to 2D spread, lateral offset from the 2D centroid.
pub fn perspective_initialization(
    s: &Matrix3xX<f64>,
    w: &Pose2D,
    r: &Matrix3<f64>,
    intr: &Intrinsics,
) -> Result<Vector3<f64>> {
    let rs = r * s;
    let spread3 = rms_spread(rs.column_iter().map(|c| Vector2::new(c.x, c.y)));
    let spread2 = rms_spread(w.column_iter().map(|c| c.into_owned()));
    if !(spread2 > 0.0 && spread3 > 0.0) {
        return Err(Error::DegeneratePose("zero spread in perspective initialization".into()));
    }
    let z0 = intr.focal * spread3 / spread2;
    let mean3 = rs.column_mean();
    let mean2 = w.column_mean();
    let lateral = (mean2 - intr.principal) * (z0 / intr.focal);
    Ok(Vector3::new(lateral.x - mean3.x, lateral.y - mean3.y, z0 - mean3.z))
}

/// Per-frame perspective refinement of the camera with the reconstructed
/// 3D poses and the 2D observations held fixed, starting from the
/// weak-perspective rotations.
pub fn perspective_adjust(
    est: &SequenceEstimate,
    obs: &Pose2DSequence,
    intr: &Intrinsics,
    opts: &PnpOptions,
) -> Result<PerspectiveTrajectory> {
    crate::objective::check_dims(est, obs)?;
    if !(intr.focal > 0.0) {
        return Err(Error::InvalidParameter("focal length must be positive".into()));
    }
    let frames: Vec<Result<(Matrix3<f64>, Vector3<f64>, bool)>> = (0..est.frame_count())
        .into_par_iter()
        .map(|t| {
            let s = est.reconstruct_pose(t)?.coords;
            let r0 = est.camera.rotations[t];
            let t0 = perspective_initialization(&s, &obs.frames[t], &r0, intr)?;
            match pnp_refine(&s, &obs.frames[t], &r0, &t0, intr, opts) {
                Ok(f) if f.converged && f.rotation.iter().all(|v| v.is_finite()) => {
                    Ok((f.rotation, f.translation, false))
                }
                _ => Ok((r0, t0, true)),
            }
        })
        .collect();
    let mut out = PerspectiveTrajectory {
        rotations: Vec::new(),
        translations: Vec::new(),
        fallback_frames: Vec::new(),
    };
    for (t, f) in frames.into_iter().enumerate() {
        let (r, tr, fell_back) = f?;
        if fell_back {
            out.fallback_frames.push(t);
        }
        out.rotations.push(r);
        out.translations.push(tr);
    }
    if !out.fallback_frames.is_empty() {
        warn!(
            "perspective refinement kept the initialization on {} frames",
            out.fallback_frames.len()
        );
    }
    Ok(out)
}
