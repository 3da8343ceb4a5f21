//! Domain types shared by every stage of the estimator.
//!
//! Coordinate contract: 3D poses are `3 x p` matrices (one column per
//! joint). 2D poses are `2 x p` matrices in box coordinates: the subject
//! bounding box spans `[0, BOX_SIZE]^2`, so one unit is four cells of a
//! 32 x 32 heat map (32 pixels of a 256 pixel crop). At this scale the
//! default 2D precision `nu = 4` corresponds to a noise std of two cells,
//! in line with the width of a detector heat-map peak. 3D poses share
//! that unit. Camera rotations are full SO(3) elements; the
//! weak-perspective projection uses their top two rows and carries no
//! scale parameter.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2xX, Matrix3, Matrix3xX, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};

/// Side length of the subject bounding box in 2D coordinate units.
pub const BOX_SIZE: f64 = 8.0;

/// A 2D pose, `2 x p`.
pub type Pose2D = Matrix2xX<f64>;

/// Joint layout of the articulated body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub joint_names: Vec<String>,
    pub limb_edges: Vec<(usize, usize)>,
    #[serde(default)]
    pub left_right_pairs: Vec<(usize, usize)>,
    /// Joint used for root alignment and limb rescaling.
    #[serde(default)]
    pub root: usize,
}

impl SkeletonSpec {
    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    /// 15-joint body: pelvis, legs, thorax, head and arms.
    pub fn human15() -> Self {
        let names = [
            "pelvis",
            "r_hip",
            "r_knee",
            "r_ankle",
            "l_hip",
            "l_knee",
            "l_ankle",
            "thorax",
            "head",
            "l_shoulder",
            "l_elbow",
            "l_wrist",
            "r_shoulder",
            "r_elbow",
            "r_wrist",
        ];
        SkeletonSpec {
            joint_names: names.iter().map(|s| s.to_string()).collect(),
            limb_edges: vec![
                (0, 1),
                (1, 2),
                (2, 3),
                (0, 4),
                (4, 5),
                (5, 6),
                (0, 7),
                (7, 8),
                (7, 9),
                (9, 10),
                (10, 11),
                (7, 12),
                (12, 13),
                (13, 14),
            ],
            left_right_pairs: vec![(1, 4), (2, 5), (3, 6), (9, 12), (10, 13), (11, 14)],
            root: 0,
        }
    }

    /// Serial chain `0 - 1 - ... - (p-1)` rooted at joint 0.
    pub fn chain(p: usize) -> Self {
        SkeletonSpec {
            joint_names: (0..p).map(|j| format!("j{j}")).collect(),
            limb_edges: (1..p).map(|j| (j - 1, j)).collect(),
            left_right_pairs: Vec::new(),
            root: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    pub coords: Matrix3xX<f64>,
}

impl Pose3D {
    pub fn new(coords: Matrix3xX<f64>) -> Self {
        Pose3D { coords }
    }

    pub fn zeros(p: usize) -> Self {
        Pose3D {
            coords: Matrix3xX::zeros(p),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.coords.ncols()
    }

    pub fn centroid(&self) -> nalgebra::Vector3<f64> {
        self.coords.column_mean()
    }

    /// RMS distance of the joints from their centroid.
    pub fn body_scale(&self) -> f64 {
        let c = self.centroid();
        let p = self.joint_count().max(1) as f64;
        let ss: f64 = self
            .coords
            .column_iter()
            .map(|x| (x - c).norm_squared())
            .sum();
        (ss / p).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose3DSequence {
    pub frames: Vec<Pose3D>,
}

impl Pose3DSequence {
    pub fn new(frames: Vec<Pose3D>) -> Self {
        Pose3DSequence { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.frames.first().map_or(0, Pose3D::joint_count)
    }

    pub fn mean_body_scale(&self) -> f64 {
        if self.frames.is_empty() {
            return 0.0;
        }
        self.frames.iter().map(Pose3D::body_scale).sum::<f64>() / self.frames.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose2DSequence {
    pub frames: Vec<Pose2D>,
}

impl Pose2DSequence {
    pub fn new(frames: Vec<Pose2D>) -> Self {
        Pose2DSequence { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.ncols())
    }
}

/// Overcomplete set of unit-norm basis poses.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseDictionary {
    pub atoms: Vec<Matrix3xX<f64>>,
    pub skeleton: SkeletonSpec,
}

impl PoseDictionary {
    /// Builds a dictionary, rescaling every atom to unit Frobenius norm.
    pub fn normalized(atoms: Vec<Matrix3xX<f64>>, skeleton: SkeletonSpec) -> Result<Self> {
        let mut out = Vec::with_capacity(atoms.len());
        for (i, a) in atoms.into_iter().enumerate() {
            let norm = a.norm();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::DegeneratePose(format!("atom {i} has zero or non-finite norm")));
            }
            out.push(a / norm);
        }
        let dict = PoseDictionary {
            atoms: out,
            skeleton,
        };
        crate::validate::Validate::check(&dict)?;
        Ok(dict)
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn joint_count(&self) -> usize {
        self.atoms.first().map_or(0, |a| a.ncols())
    }

    /// Mean of the atoms.
    pub fn mean_pose(&self) -> Matrix3xX<f64> {
        let mut m = Matrix3xX::zeros(self.joint_count());
        for a in &self.atoms {
            m += a;
        }
        m / self.atoms.len().max(1) as f64
    }

    /// `sum_i c_i B_i` for one coefficient column.
    pub fn combine(&self, coeffs: impl IntoIterator<Item = f64>) -> Matrix3xX<f64> {
        let mut s = Matrix3xX::zeros(self.joint_count());
        for (c, a) in coeffs.into_iter().zip(&self.atoms) {
            if c != 0.0 {
                s += a * c;
            }
        }
        s
    }

    /// Atoms flattened column-major into a `3p x k` matrix.
    pub fn flat_matrix(&self) -> DMatrix<f64> {
        let p = self.joint_count();
        DMatrix::from_fn(3 * p, self.atom_count(), |r, i| self.atoms[i][r])
    }
}

/// `k x n` coefficient matrix; column `t` holds the weights of frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffSequence {
    pub values: DMatrix<f64>,
}

impl CoeffSequence {
    pub fn zeros(k: usize, n: usize) -> Self {
        CoeffSequence {
            values: DMatrix::zeros(k, n),
        }
    }

    pub fn atom_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn frame_count(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraTrajectory {
    pub rotations: Vec<Matrix3<f64>>,
    pub translations: Vec<Vector2<f64>>,
}

impl CameraTrajectory {
    pub fn identity(n: usize) -> Self {
        CameraTrajectory {
            rotations: vec![Matrix3::identity(); n],
            translations: vec![Vector2::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    /// The 2x3 weak-perspective block of frame `t`.
    pub fn projection(&self, t: usize) -> Matrix2x3<f64> {
        self.rotations[t].fixed_rows::<2>(0).into_owned()
    }
}

/// Model weights and solver controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    /// L1 weight on the coefficients.
    pub alpha: f64,
    /// Temporal smoothness of the coefficients.
    pub beta: f64,
    /// Temporal smoothness of the projected rotations.
    pub gamma: f64,
    /// Precision of the 2D observation model.
    pub nu: f64,
    pub bcd_tol: f64,
    pub bcd_max_iters: usize,
    pub apg_tol: f64,
    pub apg_max_iters: usize,
    pub rot_grad_tol: f64,
    pub rot_max_iters: usize,
    /// EM stops once no expected joint location moves further than this
    /// between E-steps (box units).
    pub em_tol: f64,
    pub em_max_iters: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            alpha: 0.1,
            beta: 5.0,
            gamma: 0.5,
            nu: 4.0,
            bcd_tol: 1e-6,
            bcd_max_iters: 100,
            apg_tol: 1e-7,
            apg_max_iters: 500,
            rot_grad_tol: 1e-8,
            rot_max_iters: 100,
            em_tol: 1e-4 * BOX_SIZE,
            em_max_iters: 50,
        }
    }
}

impl ModelParams {
    /// Same solver controls with every prior weight set to zero.
    pub fn unpenalized(&self) -> Self {
        ModelParams {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..self.clone()
        }
    }
}

/// Cell layout of a heat map covering the subject box. Cell `(row, col)`
/// has its center at `((col + 0.5) * cw, (row + 0.5) * ch)` with cell sides
/// `cw = BOX_SIZE / width`, `ch = BOX_SIZE / height`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridGeometry {
    pub height: usize,
    pub width: usize,
}

impl GridGeometry {
    pub fn new(height: usize, width: usize) -> Self {
        GridGeometry { height, width }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Vector2<f64> {
        Vector2::new(
            (col as f64 + 0.5) * self.cell_width(),
            (row as f64 + 0.5) * self.cell_height(),
        )
    }

    /// Centers of all cells in row-major order.
    pub fn centers(&self) -> Vec<Vector2<f64>> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .map(|(r, c)| self.cell_center(r, c))
            .collect()
    }

    pub fn cell_width(&self) -> f64 {
        BOX_SIZE / self.width as f64
    }

    pub fn cell_height(&self) -> f64 {
        BOX_SIZE / self.height as f64
    }

    /// Half the cell diagonal, the discretization bound for point estimates.
    pub fn half_cell(&self) -> f64 {
        0.5 * self.cell_width().max(self.cell_height())
    }
}

/// Per-frame, per-joint discrete location distributions. Maps are stored
/// row-major, frame-major: map `(t, j)` occupies
/// `data[(t * p + j) * H * W ..][.. H * W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMapStack {
    pub frames: usize,
    pub joints: usize,
    pub grid: GridGeometry,
    pub data: Vec<f64>,
}

impl HeatMapStack {
    pub fn zeros(frames: usize, joints: usize, grid: GridGeometry) -> Self {
        HeatMapStack {
            frames,
            joints,
            grid,
            data: vec![0.0; frames * joints * grid.cells()],
        }
    }

    pub fn uniform(frames: usize, joints: usize, grid: GridGeometry) -> Self {
        let v = 1.0 / grid.cells() as f64;
        HeatMapStack {
            frames,
            joints,
            grid,
            data: vec![v; frames * joints * grid.cells()],
        }
    }

    fn offset(&self, t: usize, j: usize) -> usize {
        (t * self.joints + j) * self.grid.cells()
    }

    pub fn map(&self, t: usize, j: usize) -> &[f64] {
        let o = self.offset(t, j);
        &self.data[o..o + self.grid.cells()]
    }

    pub fn map_mut(&mut self, t: usize, j: usize) -> &mut [f64] {
        let o = self.offset(t, j);
        let cells = self.grid.cells();
        &mut self.data[o..o + cells]
    }

    /// Rescales every map to unit mass. Returns the largest deviation of an
    /// original mass from one; errors on a map with no mass.
    pub fn normalize(&mut self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for t in 0..self.frames {
            for j in 0..self.joints {
                let m = self.map_mut(t, j);
                let s: f64 = m.iter().sum();
                if !(s.is_finite() && s > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "heat map (frame {t}, joint {j}) has no mass"
                    )));
                }
                worst = worst.max((s - 1.0).abs());
                m.iter_mut().for_each(|v| *v /= s);
            }
        }
        Ok(worst)
    }

    /// Cell of maximum value, ties broken by the lowest row-major index.
    pub fn argmax_cell(&self, t: usize, j: usize) -> (usize, usize) {
        let m = self.map(t, j);
        let mut best = 0;
        for (i, &v) in m.iter().enumerate() {
            if v > m[best] {
                best = i;
            }
        }
        (best / self.grid.width, best % self.grid.width)
    }

    /// Argmax locations as a 2D pose sequence.
    pub fn argmax_poses(&self) -> Pose2DSequence {
        let frames = (0..self.frames)
            .map(|t| {
                Pose2D::from_fn(self.joints, |r, j| {
                    let (row, col) = self.argmax_cell(t, j);
                    self.grid.cell_center(row, col)[r]
                })
            })
            .collect();
        Pose2DSequence { frames }
    }
}

/// The parameter bundle `{C, R, T}` together with the dictionary it refers to.
#[derive(Debug, Clone)]
pub struct SequenceEstimate {
    pub coeffs: CoeffSequence,
    pub camera: CameraTrajectory,
    pub dictionary: Arc<PoseDictionary>,
}

impl SequenceEstimate {
    pub fn new(
        coeffs: CoeffSequence,
        camera: CameraTrajectory,
        dictionary: Arc<PoseDictionary>,
    ) -> Result<Self> {
        ensure_dims(coeffs.atom_count() == dictionary.atom_count(), || {
            format!(
                "coefficients have {} rows but the dictionary has {} atoms",
                coeffs.atom_count(),
                dictionary.atom_count()
            )
        })?;
        ensure_dims(coeffs.frame_count() == camera.len(), || {
            format!(
                "{} coefficient frames vs {} camera frames",
                coeffs.frame_count(),
                camera.len()
            )
        })?;
        ensure_dims(camera.translations.len() == camera.rotations.len(), || {
            "rotation and translation counts differ".into()
        })?;
        Ok(SequenceEstimate {
            coeffs,
            camera,
            dictionary,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.coeffs.frame_count()
    }

    pub fn joint_count(&self) -> usize {
        self.dictionary.joint_count()
    }

    fn check_frame(&self, t: usize) -> Result<()> {
        if t < self.frame_count() {
            Ok(())
        } else {
            Err(Error::FrameOutOfRange {
                index: t,
                frames: self.frame_count(),
            })
        }
    }

    /// `S_t = sum_i c_it B_i`.
    pub fn reconstruct_pose(&self, t: usize) -> Result<Pose3D> {
        self.check_frame(t)?;
        Ok(Pose3D::new(self.shape(t)))
    }

    /// Weak-perspective projection `P R_t S_t + T_t 1^T`.
    pub fn project(&self, t: usize) -> Result<Pose2D> {
        self.check_frame(t)?;
        Ok(self.projection_of(t, &self.shape(t)))
    }

    pub(crate) fn shape(&self, t: usize) -> Matrix3xX<f64> {
        self.dictionary
            .combine(self.coeffs.values.column(t).iter().copied())
    }

    pub(crate) fn projection_of(&self, t: usize, s: &Matrix3xX<f64>) -> Pose2D {
        let mut w = self.camera.projection(t) * s;
        let tr = self.camera.translations[t];
        for mut col in w.column_iter_mut() {
            col += tr;
        }
        w
    }

    pub fn reconstruct_all(&self) -> Pose3DSequence {
        Pose3DSequence::new(
            (0..self.frame_count())
                .map(|t| Pose3D::new(self.shape(t)))
                .collect(),
        )
    }

    /// Poses expressed in the camera frame, `R_t S_t`.
    pub fn camera_frame_poses(&self) -> Pose3DSequence {
        Pose3DSequence::new(
            (0..self.frame_count())
                .map(|t| Pose3D::new(self.camera.rotations[t] * self.shape(t)))
                .collect(),
        )
    }

    pub fn project_all(&self) -> Pose2DSequence {
        Pose2DSequence::new(
            (0..self.frame_count())
                .map(|t| self.projection_of(t, &self.shape(t)))
                .collect(),
        )
    }

    pub fn coeff_column(&self, t: usize) -> DVector<f64> {
        self.coeffs.values.column(t).into_owned()
    }
}
