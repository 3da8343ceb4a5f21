//! Learning the pose dictionary from a corpus of 3D poses.
//!
//! The learner alternates lasso sparse coding of every pose (the same APG
//! solver the sequence solver uses, with one frame and no smoothness) with
//! a block least-squares update of one atom at a time. Each atom update is
//! projected onto the unit ball, and afterwards every atom is rescaled to
//! unit norm with its coefficient row shrunk to compensate. The rescale
//! leaves the reconstruction unchanged and can only lower the L1 term, so
//! the lasso objective never increases between outer iterations.

use log::{debug, info};
use nalgebra::{DMatrix, DVector, Matrix3xX};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apg::{self, ApgOptions, CoeffProblem, Grams, QuadraticL1};
use crate::error::{Error, Result};
use crate::so3;
use crate::types::{Pose3D, Pose3DSequence, PoseDictionary, SkeletonSpec};

/// Coefficients at or below this magnitude count as zero in sparsity
/// statistics.
pub const NEAR_ZERO: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DictLearnConfig {
    pub atom_count: usize,
    /// L1 weight of the sparse-coding step. Sized for corpora in metres.
    pub sparsity_weight: f64,
    pub outer_iters: usize,
    pub seed: u64,
    pub apg_tol: f64,
    pub apg_max_iters: usize,
}

impl Default for DictLearnConfig {
    fn default() -> Self {
        DictLearnConfig {
            atom_count: 64,
            sparsity_weight: 0.03,
            outer_iters: 50,
            seed: 0,
            apg_tol: 1e-9,
            apg_max_iters: 2000,
        }
    }
}

impl DictLearnConfig {
    pub fn check(&self) -> Result<()> {
        if self.atom_count == 0 {
            return Err(Error::InvalidParameter("atom_count must be at least 1".into()));
        }
        if !(self.sparsity_weight >= 0.0 && self.sparsity_weight.is_finite()) {
            return Err(Error::InvalidParameter(
                "sparsity_weight must be finite and non-negative".into(),
            ));
        }
        if !(self.apg_tol > 0.0) || self.apg_max_iters == 0 {
            return Err(Error::InvalidParameter("APG controls must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DictLearnReport {
    /// Lasso objective `1/2 ||X - D C||^2 + lambda ||C||_1` before the first
    /// outer iteration and after each one (post-rescale).
    pub objective_trace: Vec<f64>,
    /// `||X - D C||_F / ||X||_F` at the end.
    pub relative_residual: f64,
    /// Fraction of coefficients with magnitude at most [`NEAR_ZERO`].
    pub zero_fraction: f64,
    /// Atoms re-seeded from the worst-fitted pose because nothing used them.
    pub reseeded_atoms: usize,
}

/// Root-centers every pose and rotates it onto the first pose (rotation
/// only, no scaling).
pub fn align_corpus(poses: &Pose3DSequence, skeleton: &SkeletonSpec) -> Result<Pose3DSequence> {
    if poses.len() < 2 {
        return Err(Error::InsufficientTrainingPoses {
            needed: 2,
            got: poses.len(),
        });
    }
    let p = poses.joint_count();
    if skeleton.root >= p {
        return Err(Error::DimensionMismatch(format!(
            "root joint {} out of range for {p} joints",
            skeleton.root
        )));
    }
    let centered: Vec<Matrix3xX<f64>> = poses
        .frames
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            if pose.joint_count() != p {
                return Err(Error::DimensionMismatch(format!(
                    "pose {i} has {} joints, expected {p}",
                    pose.joint_count()
                )));
            }
            if pose.coords.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("corpus pose"));
            }
            if pose.body_scale() <= 1e-12 {
                return Err(Error::DegeneratePose(format!("corpus pose {i} has coincident joints")));
            }
            let root = pose.coords.column(skeleton.root).into_owned();
            let mut c = pose.coords.clone();
            for mut col in c.column_iter_mut() {
                col -= root;
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let reference = &centered[0];
    let aligned = centered
        .par_iter()
        .map(|c| {
            let rotation = so3::project_to_so3(&(reference * c.transpose()));
            Pose3D::new(rotation * c)
        })
        .collect();
    Ok(Pose3DSequence::new(aligned))
}

/// Corpus as a `3p x N` matrix, one flattened pose per column.
fn corpus_matrix(corpus: &Pose3DSequence) -> DMatrix<f64> {
    let p = corpus.joint_count();
    DMatrix::from_fn(3 * p, corpus.len(), |r, c| corpus.frames[c].coords[r])
}

fn lasso_objective(x: &DMatrix<f64>, d: &DMatrix<f64>, c: &DMatrix<f64>, lambda: f64) -> f64 {
    0.5 * (x - d * c).norm_squared() + lambda * apg::l1_norm(c)
}

/// Lasso codes of every column of `x` against `d`, warm-started from `warm`.
/// Columns are independent problems and are solved in parallel.
fn sparse_code(
    x: &DMatrix<f64>,
    d: &DMatrix<f64>,
    warm: &DMatrix<f64>,
    config: &DictLearnConfig,
) -> DMatrix<f64> {
    let gram = d.tr_mul(d);
    let k = d.ncols();
    let cols: Vec<DVector<f64>> = (0..x.ncols())
        .into_par_iter()
        .map(|j| {
            let xj = x.column(j);
            let problem = CoeffProblem {
                grams: Grams::Shared(gram.clone()),
                linear: DMatrix::from_column_slice(k, 1, d.tr_mul(&xj).as_slice()),
                constant: 0.5 * xj.norm_squared(),
                scale: 1.0,
                beta: 0.0,
                alpha: config.sparsity_weight,
            };
            let start = DMatrix::from_column_slice(k, 1, warm.column(j).as_slice());
            let result = apg::minimize(
                &problem,
                &start,
                ApgOptions {
                    tol: config.apg_tol,
                    max_iters: config.apg_max_iters,
                },
            );
            // APG starts from the warm codes, but guard against a worse exit
            let best = if result.objective <= problem.composite(&start) {
                result.x
            } else {
                start
            };
            DVector::from_column_slice(best.as_slice())
        })
        .collect();
    let mut out = DMatrix::zeros(k, x.ncols());
    for (j, c) in cols.iter().enumerate() {
        out.set_column(j, c);
    }
    out
}

/// One sweep of per-atom least squares, each atom kept inside the unit
/// ball. Returns the number of unused atoms that were re-seeded.
fn update_atoms(x: &DMatrix<f64>, d: &mut DMatrix<f64>, c: &mut DMatrix<f64>) -> usize {
    let mut residual = x - &*d * &*c;
    let mut reseeded = 0;
    for i in 0..d.ncols() {
        let row = c.row(i).transpose();
        let energy = row.norm_squared();
        if energy == 0.0 {
            // an unused atom moves to the worst-fitted pose; its zero row
            // keeps the reconstruction unchanged
            let worst = (0..residual.ncols())
                .max_by(|&a, &b| {
                    residual
                        .column(a)
                        .norm_squared()
                        .total_cmp(&residual.column(b).norm_squared())
                        .then(b.cmp(&a))
                })
                .unwrap_or(0);
            let target = residual.column(worst).into_owned();
            let norm = target.norm();
            if norm > 1e-12 {
                d.set_column(i, &(target / norm));
                reseeded += 1;
            }
            continue;
        }
        let atom = d.column(i).into_owned();
        // residual with atom i removed, projected onto its coefficient row
        let partial = &residual + &atom * row.transpose();
        let mut update = &partial * &row / energy;
        let norm = update.norm();
        if norm > 1.0 {
            update /= norm;
        }
        residual = partial - &update * row.transpose();
        d.set_column(i, &update);
    }
    reseeded
}

/// Rescales every atom to unit norm, moving the scale into its coefficient
/// row. Atoms that collapsed to zero are left for the next reseed.
fn renormalize(d: &mut DMatrix<f64>, c: &mut DMatrix<f64>) {
    for i in 0..d.ncols() {
        let norm = d.column(i).norm();
        if norm > 1e-300 {
            d.column_mut(i).unscale_mut(norm);
            c.row_mut(i).scale_mut(norm);
        }
    }
}

/// Learns `config.atom_count` unit-norm atoms from an aligned corpus.
pub fn learn_dictionary(
    corpus: &Pose3DSequence,
    skeleton: &SkeletonSpec,
    config: &DictLearnConfig,
) -> Result<(PoseDictionary, DictLearnReport)> {
    config.check()?;
    let n = corpus.len();
    let k = config.atom_count;
    if k > n {
        return Err(Error::InsufficientTrainingPoses { needed: k, got: n });
    }
    let p = corpus.joint_count();
    if p != skeleton.joint_count() {
        return Err(Error::DimensionMismatch(format!(
            "corpus has {p} joints, skeleton has {}",
            skeleton.joint_count()
        )));
    }
    if corpus.frames.iter().any(|f| f.joint_count() != p) {
        return Err(Error::DimensionMismatch("corpus poses differ in joint count".into()));
    }
    if corpus.frames.iter().any(|f| f.coords.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("corpus pose"));
    }
    let x = corpus_matrix(corpus);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut picks = sample(&mut rng, n, k).into_vec();
    picks.sort_unstable();
    let mut d = DMatrix::zeros(3 * p, k);
    for (i, &j) in picks.iter().enumerate() {
        let col = x.column(j);
        let norm = col.norm();
        if norm <= 1e-12 {
            return Err(Error::DegeneratePose(format!("corpus pose {j} is all zeros")));
        }
        d.set_column(i, &(col / norm));
    }

    let mut c = DMatrix::zeros(k, n);
    let mut trace = vec![lasso_objective(&x, &d, &c, config.sparsity_weight)];
    let mut reseeded_atoms = 0;
    for iter in 0..config.outer_iters {
        c = sparse_code(&x, &d, &c, config);
        reseeded_atoms += update_atoms(&x, &mut d, &mut c);
        renormalize(&mut d, &mut c);
        let f = lasso_objective(&x, &d, &c, config.sparsity_weight);
        debug!("dictionary iteration {}: objective {f:.6e}", iter + 1);
        trace.push(f);
    }
    // final codes against the final atoms
    c = sparse_code(&x, &d, &c, config);

    let x_norm = x.norm().max(f64::MIN_POSITIVE);
    let relative_residual = (&x - &d * &c).norm() / x_norm;
    let zeros = c.iter().filter(|v| v.abs() <= NEAR_ZERO).count();
    let report = DictLearnReport {
        objective_trace: trace,
        relative_residual,
        zero_fraction: zeros as f64 / (k * n) as f64,
        reseeded_atoms,
    };
    info!(
        "learned {k} atoms from {n} poses: relative residual {:.3e}, {:.1}% zero codes",
        report.relative_residual,
        100.0 * report.zero_fraction
    );
    let atoms = (0..k)
        .map(|i| Matrix3xX::from_column_slice(d.column(i).as_slice()))
        .collect();
    let dict = PoseDictionary::normalized(atoms, skeleton.clone())?;
    Ok((dict, report))
}
