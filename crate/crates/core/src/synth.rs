//! Seeded synthetic sequences with ground truth: coefficients, cameras, 2D
//! projections, rendered heat maps and corrupted heat maps.
//!
//! Every random draw comes from a ChaCha stream derived from the seed and a
//! fixed per-purpose stream id, so outputs are reproducible bit for bit and
//! independent of thread count.

use std::f64::consts::PI;

use log::warn;
use nalgebra::{DMatrix, Matrix3, Matrix3xX, Vector2, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::so3;
use crate::types::{
    CameraTrajectory, CoeffSequence, GridGeometry, HeatMapStack, Pose2DSequence,
    Pose3D, Pose3DSequence, PoseDictionary, SkeletonSpec, BOX_SIZE,
};
use crate::validate::Validate;

const STREAM_COEFFS: u64 = 1;
const STREAM_CAMERA: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_CORRUPT: u64 = 4;
const STREAM_DICT: u64 = 5;
const STREAM_CORPUS: u64 = 6;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("standard deviation is finite and non-negative")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionConfig {
    /// Fraction of `(frame, joint)` maps that receive distractor blobs.
    pub fraction: f64,
    pub distractor_count: usize,
    /// Mass of each distractor blob relative to the original unit-mass map.
    pub distractor_weight: f64,
    /// Per frame and left/right pair probability of exchanging the channels.
    pub swap_probability: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            fraction: 0.0,
            distractor_count: 1,
            distractor_weight: 1.5,
            swap_probability: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub frames: usize,
    /// Number of atoms with nonzero coefficients.
    pub active_atoms: usize,
    /// Base coefficient magnitude (box units, atoms have unit norm); active
    /// values start in `[0.5, 1.5] * coeff_scale`.
    pub coeff_scale: f64,
    /// Standard deviation of the per-frame coefficient random walk.
    pub coeff_walk_std: f64,
    /// Degrees per second.
    pub camera_rotation_rate: f64,
    /// Frames per second.
    pub frame_rate: f64,
    /// Isotropic 2D noise, box units.
    pub noise_std_2d: f64,
    pub grid_height: usize,
    pub grid_width: usize,
    /// Heat-map blob standard deviation in grid cells.
    pub blob_sigma: f64,
    pub corruption: CorruptionConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 100,
            active_atoms: 3,
            // bodies then span most of the box
            coeff_scale: 0.3125 * BOX_SIZE,
            coeff_walk_std: 0.02,
            camera_rotation_rate: 15.0,
            frame_rate: 10.0,
            noise_std_2d: 0.0,
            grid_height: 32,
            grid_width: 32,
            blob_sigma: 1.5,
            corruption: CorruptionConfig::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn grid(&self) -> GridGeometry {
        GridGeometry::new(self.grid_height, self.grid_width)
    }

    pub fn check(&self) -> Result<()> {
        let nonneg = [
            ("coeff_scale", self.coeff_scale),
            ("coeff_walk_std", self.coeff_walk_std),
            ("camera_rotation_rate", self.camera_rotation_rate),
            ("noise_std_2d", self.noise_std_2d),
            ("distractor_weight", self.corruption.distractor_weight),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and >= 0")));
            }
        }
        for (name, v) in [
            ("corruption fraction", self.corruption.fraction),
            ("swap_probability", self.corruption.swap_probability),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::InvalidParameter("frame_rate must be positive".into()));
        }
        if !(self.blob_sigma > 0.0) {
            return Err(Error::InvalidParameter("blob_sigma must be positive".into()));
        }
        if self.frames == 0 || self.grid_height == 0 || self.grid_width == 0 {
            return Err(Error::InvalidParameter(
                "frames and grid dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Ground truth of a generated sequence.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Shapes in the body frame, `S_t`.
    pub poses: Pose3DSequence,
    pub coeffs: CoeffSequence,
    pub camera: CameraTrajectory,
}

impl GroundTruth {
    /// Poses in the camera frame, `R_t S_t`.
    pub fn camera_frame_poses(&self) -> Pose3DSequence {
        Pose3DSequence::new(
            self.poses
                .frames
                .iter()
                .zip(&self.camera.rotations)
                .map(|(s, r)| Pose3D::new(r * &s.coords))
                .collect(),
        )
    }
}

/// Sparse smooth coefficients and a camera turning about a fixed random axis.
pub fn generate_sequence(config: &SynthConfig, dict: &PoseDictionary) -> Result<GroundTruth> {
    config.check()?;
    let k = dict.atom_count();
    let n = config.frames;
    if config.active_atoms == 0 || config.active_atoms > k {
        return Err(Error::InvalidParameter(format!(
            "active_atoms must lie in 1..={k}"
        )));
    }

    let mut rng = rng_for(config.seed, STREAM_COEFFS);
    let mut support: Vec<usize> = sample(&mut rng, k, config.active_atoms).into_vec();
    support.sort_unstable();
    let mut coeffs = DMatrix::zeros(k, n);
    let walk = normal(config.coeff_walk_std);
    for &i in &support {
        let mut v = config.coeff_scale * rng.random_range(0.5..1.5);
        for t in 0..n {
            if t > 0 && config.coeff_walk_std > 0.0 {
                v += walk.sample(&mut rng);
            }
            coeffs[(i, t)] = v;
        }
    }

    let mut rng = rng_for(config.seed, STREAM_CAMERA);
    let axis = Vector3::from(UnitSphere.sample(&mut rng));
    // start from a random heading about the vertical image axis
    let heading = rng.random_range(-PI..PI);
    let r0 = so3::axis_angle(&Vector3::y(), heading);
    let step = config.camera_rotation_rate.to_radians() / config.frame_rate;

    let mut poses = Vec::with_capacity(n);
    let mut camera = CameraTrajectory::identity(n);
    for t in 0..n {
        let s = dict.combine(coeffs.column(t).iter().copied());
        let r = so3::axis_angle(&axis, step * t as f64) * r0;
        let proj = r.fixed_rows::<2>(0).into_owned() * &s;
        camera.rotations[t] = so3::project_to_so3(&r);
        camera.translations[t] = Vector2::repeat(0.5 * BOX_SIZE) - proj.column_mean();
        poses.push(Pose3D::new(s));
    }
    Ok(GroundTruth {
        poses: Pose3DSequence::new(poses),
        coeffs: CoeffSequence { values: coeffs },
        camera,
    })
}

/// Training poses that are exact sparse combinations of the atoms: every
/// pose draws `active` distinct atoms with weights `U(0.5, 1.5)`. Returns
/// the poses and the `k x count` generating codes.
pub fn sparse_corpus(
    dict: &PoseDictionary,
    count: usize,
    active: usize,
    seed: u64,
) -> Result<(Pose3DSequence, DMatrix<f64>)> {
    let k = dict.atom_count();
    if active == 0 || active > k {
        return Err(Error::InvalidParameter(format!("active must lie in 1..={k}")));
    }
    let mut rng = rng_for(seed, STREAM_CORPUS);
    let mut codes = DMatrix::zeros(k, count);
    let mut poses = Vec::with_capacity(count);
    for j in 0..count {
        for i in sample(&mut rng, k, active).into_vec() {
            codes[(i, j)] = rng.random_range(0.5..1.5);
        }
        poses.push(Pose3D::new(dict.combine(codes.column(j).iter().copied())));
    }
    Ok((Pose3DSequence::new(poses), codes))
}

/// `W_t = P R_t S_t + T_t 1^T` plus isotropic Gaussian noise.
pub fn project_sequence(
    poses: &Pose3DSequence,
    camera: &CameraTrajectory,
    noise_std_2d: f64,
    seed: u64,
) -> Result<Pose2DSequence> {
    ensure_dims(poses.len() == camera.len(), || {
        format!("{} poses vs {} camera frames", poses.len(), camera.len())
    })?;
    if !(noise_std_2d >= 0.0) {
        return Err(Error::InvalidParameter("noise_std_2d must be >= 0".into()));
    }
    let mut rng = rng_for(seed, STREAM_NOISE);
    let noise = normal(noise_std_2d);
    let frames = poses
        .frames
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let mut w = camera.projection(t) * &s.coords;
            let tr = camera.translations[t];
            for mut col in w.column_iter_mut() {
                col += tr;
                if noise_std_2d > 0.0 {
                    col[0] += noise.sample(&mut rng);
                    col[1] += noise.sample(&mut rng);
                }
            }
            w
        })
        .collect();
    Ok(Pose2DSequence::new(frames))
}

/// Rendered heat maps plus the joints that had to be clamped into the box.
#[derive(Debug, Clone)]
pub struct RenderedHeatMaps {
    pub heatmaps: HeatMapStack,
    /// `(frame, joint)` pairs whose location lay outside the box.
    pub clamped: Vec<(usize, usize)>,
}

/// Writes a unit-mass Gaussian blob of std `sigma` cells at `center` into
/// `out`, scaled by `mass`.
fn add_blob(out: &mut [f64], grid: GridGeometry, center: Vector2<f64>, sigma: f64, mass: f64) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut blob = vec![0.0; grid.cells()];
    let mut total = 0.0;
    let (cx, cy) = (center.x / grid.cell_width(), center.y / grid.cell_height());
    for row in 0..grid.height {
        let dy = (row as f64 + 0.5) - cy;
        for col in 0..grid.width {
            let dx = (col as f64 + 0.5) - cx;
            let v = (-(dx * dx + dy * dy) * inv).exp();
            blob[row * grid.width + col] = v;
            total += v;
        }
    }
    if total <= 0.0 {
        // far-off center underflowed everywhere: fall back to the nearest cell
        let col = (cx.floor().max(0.0) as usize).min(grid.width - 1);
        let row = (cy.floor().max(0.0) as usize).min(grid.height - 1);
        blob[row * grid.width + col] = 1.0;
        total = 1.0;
    }
    for (o, b) in out.iter_mut().zip(&blob) {
        *o += mass * b / total;
    }
}

/// One normalized Gaussian blob per joint at its 2D location.
pub fn render_heatmaps(obs: &Pose2DSequence, grid: GridGeometry, blob_sigma: f64) -> Result<RenderedHeatMaps> {
    obs.check()?;
    if !(blob_sigma > 0.0) {
        return Err(Error::InvalidParameter("blob_sigma must be positive".into()));
    }
    let p = obs.joint_count();
    let cells = grid.cells();
    let per_frame: Vec<(Vec<f64>, Vec<usize>)> = obs
        .frames
        .par_iter()
        .map(|w| {
            let mut data = vec![0.0; p * cells];
            let mut clamped = Vec::new();
            for j in 0..p {
                let raw = Vector2::new(w[(0, j)], w[(1, j)]);
                let c = raw.map(|v| v.clamp(0.0, BOX_SIZE));
                if c != raw {
                    clamped.push(j);
                }
                add_blob(&mut data[j * cells..(j + 1) * cells], grid, c, blob_sigma, 1.0);
            }
            (data, clamped)
        })
        .collect();
    let mut heatmaps = HeatMapStack::zeros(obs.len(), p, grid);
    let mut clamped = Vec::new();
    for (t, (data, cl)) in per_frame.into_iter().enumerate() {
        let o = t * p * cells;
        heatmaps.data[o..o + p * cells].copy_from_slice(&data);
        clamped.extend(cl.into_iter().map(|j| (t, j)));
    }
    if !clamped.is_empty() {
        warn!("{} joints clamped into the heat-map box", clamped.len());
    }
    Ok(RenderedHeatMaps { heatmaps, clamped })
}

#[derive(Debug, Clone)]
pub struct CorruptedHeatMaps {
    pub heatmaps: HeatMapStack,
    /// `(frame, joint)` maps that received distractors, sorted.
    pub corrupted: Vec<(usize, usize)>,
    /// `(frame, pair index)` left/right exchanges, sorted.
    pub swapped: Vec<(usize, usize)>,
}

/// Adds distractor blobs to an exact, seeded subset of maps and exchanges
/// left/right channels at random.
pub fn corrupt_heatmaps(
    maps: &HeatMapStack,
    skeleton: &SkeletonSpec,
    corruption: &CorruptionConfig,
    blob_sigma: f64,
    seed: u64,
) -> Result<CorruptedHeatMaps> {
    maps.check()?;
    ensure_dims(skeleton.joint_count() == maps.joints, || {
        format!("{} skeleton joints vs {} heat-map joints", skeleton.joint_count(), maps.joints)
    })?;
    if !(0.0..=1.0).contains(&corruption.fraction)
        || !(0.0..=1.0).contains(&corruption.swap_probability)
    {
        return Err(Error::InvalidParameter(
            "corruption fraction and swap probability must lie in [0, 1]".into(),
        ));
    }
    let mut out = maps.clone();
    let mut rng = rng_for(seed, STREAM_CORRUPT);
    let total = maps.frames * maps.joints;
    let count = ((corruption.fraction * total as f64).round() as usize).min(total);
    let mut chosen: Vec<usize> = sample(&mut rng, total, count).into_vec();
    chosen.sort_unstable();

    let mut corrupted = Vec::with_capacity(count);
    for idx in chosen {
        let (t, j) = (idx / maps.joints, idx % maps.joints);
        let map = out.map_mut(t, j);
        for _ in 0..corruption.distractor_count {
            let c = Vector2::new(rng.random::<f64>(), rng.random::<f64>()) * BOX_SIZE;
            add_blob(map, maps.grid, c, blob_sigma, corruption.distractor_weight);
        }
        let s: f64 = map.iter().sum();
        map.iter_mut().for_each(|v| *v /= s);
        corrupted.push((t, j));
    }

    let mut swapped = Vec::new();
    if corruption.swap_probability > 0.0 {
        for t in 0..maps.frames {
            for (k, &(a, b)) in skeleton.left_right_pairs.iter().enumerate() {
                if rng.random::<f64>() < corruption.swap_probability {
                    let ma = out.map(t, a).to_vec();
                    let mb = out.map(t, b).to_vec();
                    out.map_mut(t, a).copy_from_slice(&mb);
                    out.map_mut(t, b).copy_from_slice(&ma);
                    swapped.push((t, k));
                }
            }
        }
    }
    Ok(CorruptedHeatMaps {
        heatmaps: out,
        corrupted,
        swapped,
    })
}

/// Rest pose of [`SkeletonSpec::human15`], y pointing down, metres.
pub fn human15_rest_pose() -> Matrix3xX<f64> {
    #[rustfmt::skip]
    let pts: [[f64; 3]; 15] = [
        [0.0, 0.0, 0.0],
        [-0.12, 0.0, 0.0], [-0.12, 0.45, 0.02], [-0.12, 0.88, 0.0],
        [0.12, 0.0, 0.0], [0.12, 0.45, 0.02], [0.12, 0.88, 0.0],
        [0.0, -0.5, 0.0], [0.0, -0.75, 0.02],
        [0.18, -0.45, 0.0], [0.22, -0.18, 0.03], [0.24, 0.08, 0.05],
        [-0.18, -0.45, 0.0], [-0.22, -0.18, 0.03], [-0.24, 0.08, 0.05],
    ];
    Matrix3xX::from_fn(15, |r, j| pts[j][r])
}

fn center_columns(m: &mut Matrix3xX<f64>) {
    let c = m.column_mean();
    for mut col in m.column_iter_mut() {
        col -= c;
    }
}

/// Parent of every joint in the tree spanned by the limb edges, rooted at
/// the skeleton root. Joints not reachable from the root have no parent.
pub fn joint_parents(skeleton: &SkeletonSpec) -> Vec<Option<usize>> {
    let p = skeleton.joint_count();
    let mut parent = vec![None; p];
    let mut seen = vec![false; p];
    let mut queue = std::collections::VecDeque::from([skeleton.root]);
    seen[skeleton.root] = true;
    while let Some(q) = queue.pop_front() {
        for &(a, b) in &skeleton.limb_edges {
            let other = if a == q { b } else if b == q { a } else { continue };
            if !seen[other] {
                seen[other] = true;
                parent[other] = Some(q);
                queue.push_back(other);
            }
        }
    }
    parent
}

/// Forward kinematics with a random rotation of every bone relative to its
/// parent bone (angle std `angle_std` radians about a random axis). The
/// root keeps its orientation, so no global rotation is introduced.
pub fn articulated_pose<R: Rng + ?Sized>(
    rest: &Matrix3xX<f64>,
    skeleton: &SkeletonSpec,
    angle_std: f64,
    rng: &mut R,
) -> Matrix3xX<f64> {
    let parents = joint_parents(skeleton);
    let p = rest.ncols();
    let angle = normal(angle_std.max(0.0));
    let mut global = vec![Matrix3::identity(); p];
    let mut out = rest.clone();
    // breadth-first order guarantees parents are placed first
    let mut order = vec![skeleton.root];
    let mut i = 0;
    while i < order.len() {
        let q = order[i];
        order.extend((0..p).filter(|&j| parents[j] == Some(q)));
        i += 1;
    }
    for &j in order.iter().skip(1) {
        let q = parents[j].expect("non-root joints in the order have parents");
        let axis = Vector3::from(UnitSphere.sample(rng));
        let local = so3::axis_angle(&axis, angle.sample(rng));
        global[j] = global[q] * local;
        let bone = rest.column(j) - rest.column(q);
        let pos = out.column(q) + global[j] * bone;
        out.set_column(j, &pos);
    }
    out
}

/// Human-like atoms: articulations of the rest pose, centered and scaled
/// to unit norm.
pub fn synthetic_dictionary(atom_count: usize, angle_std: f64, seed: u64) -> Result<PoseDictionary> {
    let rest = human15_rest_pose();
    let skeleton = SkeletonSpec::human15();
    let mut rng = rng_for(seed, STREAM_DICT);
    let atoms = (0..atom_count)
        .map(|_| {
            let mut a = articulated_pose(&rest, &skeleton, angle_std, &mut rng);
            center_columns(&mut a);
            a
        })
        .collect();
    PoseDictionary::normalized(atoms, skeleton)
}

/// Centered Gaussian atoms on a serial chain of `joints` joints.
pub fn random_dictionary(joints: usize, atom_count: usize, seed: u64) -> Result<PoseDictionary> {
    let mut rng = rng_for(seed, STREAM_DICT);
    let noise = normal(1.0);
    let atoms = (0..atom_count)
        .map(|_| {
            let mut a = Matrix3xX::from_fn(joints, |_, _| noise.sample(&mut rng));
            center_columns(&mut a);
            a
        })
        .collect();
    PoseDictionary::normalized(atoms, SkeletonSpec::chain(joints))
}

/// A uniformly random rotation.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let axis = Vector3::from(UnitSphere.sample(rng));
    // angle density proportional to (1 - cos) gives the Haar measure
    let angle = loop {
        let a = rng.random_range(0.0..PI);
        if rng.random::<f64>() * 2.0 <= 1.0 - a.cos() {
            break a;
        }
    };
    so3::axis_angle(&axis, angle)
}

/// Everything needed for a heat-map experiment from one seed.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub truth: GroundTruth,
    pub observations: Pose2DSequence,
    pub heatmaps: HeatMapStack,
    pub clamped: Vec<(usize, usize)>,
    pub corrupted: Vec<(usize, usize)>,
    pub swapped: Vec<(usize, usize)>,
}

pub fn generate_scene(config: &SynthConfig, dict: &PoseDictionary) -> Result<SyntheticScene> {
    let truth = generate_sequence(config, dict)?;
    let observations = project_sequence(&truth.poses, &truth.camera, config.noise_std_2d, config.seed)?;
    let rendered = render_heatmaps(&observations, config.grid(), config.blob_sigma)?;
    let corrupted = corrupt_heatmaps(
        &rendered.heatmaps,
        &dict.skeleton,
        &config.corruption,
        config.blob_sigma,
        config.seed,
    )?;
    Ok(SyntheticScene {
        truth,
        observations,
        heatmaps: corrupted.heatmaps,
        clamped: rendered.clamped,
        corrupted: corrupted.corrupted,
        swapped: corrupted.swapped,
    })
}
