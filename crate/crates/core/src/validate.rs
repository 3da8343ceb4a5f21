//! Invariant checks for every domain value. Checks never abort; they return
//! the full list of violated invariants.

use std::fmt;

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::types::{
    CameraTrajectory, CoeffSequence, HeatMapStack, ModelParams, Pose2DSequence, Pose3D,
    Pose3DSequence, PoseDictionary, SequenceEstimate, SkeletonSpec,
};

pub const SO3_TOL: f64 = 1e-9;
pub const HEATMAP_MASS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    NonFinite,
    EmptySequence,
    NonUniformJoints,
    EdgeOutOfRange,
    SelfEdge,
    NoEdges,
    RootOutOfRange,
    BadSymmetryPairs,
    NotUnitNorm,
    EmptyDictionary,
    NotInSO3,
    CountMismatch,
    NegativeWeight,
    NonPositivePrecision,
    NegativeMass,
    UnnormalizedHeatMap,
    GridTooSmall,
}

impl ViolationKind {
    pub fn message(self) -> &'static str {
        match self {
            ViolationKind::NonFinite => "non-finite entry",
            ViolationKind::EmptySequence => "empty sequence",
            ViolationKind::NonUniformJoints => "non-uniform joint count",
            ViolationKind::EdgeOutOfRange => "edge index out of range",
            ViolationKind::SelfEdge => "self edge",
            ViolationKind::NoEdges => "empty edge list",
            ViolationKind::RootOutOfRange => "root index out of range",
            ViolationKind::BadSymmetryPairs => "left/right pairs overlap or out of range",
            ViolationKind::NotUnitNorm => "atom not unit norm",
            ViolationKind::EmptyDictionary => "empty dictionary",
            ViolationKind::NotInSO3 => "not in SO(3)",
            ViolationKind::CountMismatch => "inconsistent dimensions",
            ViolationKind::NegativeWeight => "negative weight",
            ViolationKind::NonPositivePrecision => "non-positive precision",
            ViolationKind::NegativeMass => "negative mass",
            ViolationKind::UnnormalizedHeatMap => "unnormalized heat map",
            ViolationKind::GridTooSmall => "grid smaller than 2x2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Where the violation was found, e.g. `rotations[3]`.
    pub location: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}", self.kind.message(), self.location)
    }
}

fn push(out: &mut Vec<Violation>, kind: ViolationKind, location: impl Into<String>) {
    out.push(Violation {
        kind,
        location: location.into(),
    });
}

pub trait Validate {
    fn violations(&self) -> Vec<Violation>;

    fn check(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(v))
        }
    }
}

pub fn orthogonality_error(r: &Matrix3<f64>) -> f64 {
    (r * r.transpose() - Matrix3::identity()).norm()
}

pub fn is_rotation(r: &Matrix3<f64>) -> bool {
    r.iter().all(|v| v.is_finite())
        && orthogonality_error(r) <= SO3_TOL
        && (r.determinant() - 1.0).abs() <= SO3_TOL
}

impl Validate for SkeletonSpec {
    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let p = self.joint_count();
        if self.limb_edges.is_empty() {
            push(&mut out, ViolationKind::NoEdges, "limb_edges");
        }
        for (i, &(a, b)) in self.limb_edges.iter().enumerate() {
            if a >= p || b >= p {
                push(&mut out, ViolationKind::EdgeOutOfRange, format!("limb_edges[{i}]"));
            } else if a == b {
                push(&mut out, ViolationKind::SelfEdge, format!("limb_edges[{i}]"));
            }
        }
        if self.root >= p {
            push(&mut out, ViolationKind::RootOutOfRange, "root");
        }
        let mut seen = vec![false; p];
        for (i, &(a, b)) in self.left_right_pairs.iter().enumerate() {
            let ok = a < p && b < p && a != b && !seen[a] && !seen[b];
            if ok {
                seen[a] = true;
                seen[b] = true;
            } else {
                push(&mut out, ViolationKind::BadSymmetryPairs, format!("left_right_pairs[{i}]"));
            }
        }
        out
    }
}

impl Validate for Pose3D {
    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.coords.iter().any(|v| !v.is_finite()) {
            push(&mut out, ViolationKind::NonFinite, "coords");
        }
        out
    }
}

impl Validate for Pose3DSequence {
    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.frames.is_empty() {
            push(&mut out, ViolationKind::EmptySequence, "frames");
        }
        let p = self.joint_count();
        for (t, f) in self.frames.iter().enumerate() {
            if f.joint_count() != p {
                push(&mut out, ViolationKind::NonUniformJoints, format!("frames[{t}]"));
            }
            if f.coords.iter().any(|v| !v.is_finite()) {
                push(&mut out, ViolationKind::NonFinite, format!("frames[{t}]"));
            }
        }
        out
    }
}

impl Validate for Pose2DSequence {
    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.frames.is_empty() {
            push(&mut out, ViolationKind::EmptySequence, "frames");
        }
        let p = self.joint_count();
        for (t, f) in self.frames.iter().enumerate() {
            if f.ncols() != p {
                push(&mut out, ViolationKind::NonUniformJoints, format!("frames[{t}]"));
            }
            if f.iter().any(|v| !v.is_finite()) {
                push(&mut out, ViolationKind::NonFinite, format!("frames[{t}]"));
            }
        }
        out
    }
}

impl Validate for PoseDictionary {
    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.atoms.is_empty() {
            push(&mut out, ViolationKind::EmptyDictionary, "atoms");
        }
        let p = self.skeleton.joint_count();
        for (i, a) in self.atoms.iter().enumerate() {
            if a.ncols() != p {
                push(&mut out, ViolationKind::NonUniformJoints, format!("atoms[{i}]"));
            }
            if a.iter().any(|v| !v.is_finite()) {
                push(&mut out, ViolationKind::NonFinite, format!("atoms[{i}]"));
            } else if (a.norm() - 1.0).abs() > 1e-9 {
                push(&mut out, ViolationKind::NotUnitNorm, format!("atoms[{i}]"));
            }
        }
        for v in self.skeleton.violations() {
            push(&mut out, v.kind, format!("skeleton.{}", v.location));
        }
        out
    }
}

impl Validate for CoeffSequence {
    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.values.iter().any(|v| !v.is_finite()) {
            push(&mut out, ViolationKind::NonFinite, "values");
        }
        out
    }
}

impl Validate for CameraTrajectory {
    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.rotations.len() != self.translations.len() {
            push(&mut out, ViolationKind::CountMismatch, "translations");
        }
        for (t, r) in self.rotations.iter().enumerate() {
            if !is_rotation(r) {
                push(&mut out, ViolationKind::NotInSO3, format!("rotations[{t}]"));
            }
        }
        for (t, tr) in self.translations.iter().enumerate() {
            if tr.iter().any(|v| !v.is_finite()) {
                push(&mut out, ViolationKind::NonFinite, format!("translations[{t}]"));
            }
        }
        out
    }
}

impl Validate for ModelParams {
    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                push(&mut out, ViolationKind::NegativeWeight, name);
            }
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            push(&mut out, ViolationKind::NonPositivePrecision, "nu");
        }
        out
    }
}

impl Validate for HeatMapStack {
    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.grid.height < 2 || self.grid.width < 2 {
            push(&mut out, ViolationKind::GridTooSmall, "grid");
        }
        if self.data.len() != self.frames * self.joints * self.grid.cells() {
            push(&mut out, ViolationKind::CountMismatch, "data");
            return out;
        }
        for t in 0..self.frames {
            for j in 0..self.joints {
                let m = self.map(t, j);
                let loc = format!("map(frame {t}, joint {j})");
                if m.iter().any(|v| !v.is_finite()) {
                    push(&mut out, ViolationKind::NonFinite, loc);
                } else if m.iter().any(|&v| v < 0.0) {
                    push(&mut out, ViolationKind::NegativeMass, loc);
                } else if (m.iter().sum::<f64>() - 1.0).abs() > HEATMAP_MASS_TOL {
                    push(&mut out, ViolationKind::UnnormalizedHeatMap, loc);
                }
            }
        }
        out
    }
}

impl Validate for SequenceEstimate {
    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.coeffs.atom_count() != self.dictionary.atom_count()
            || self.coeffs.frame_count() != self.camera.len()
        {
            push(&mut out, ViolationKind::CountMismatch, "estimate");
        }
        if self.frame_count() == 0 {
            push(&mut out, ViolationKind::EmptySequence, "estimate");
        }
        for v in self.coeffs.violations() {
            push(&mut out, v.kind, format!("coeffs.{}", v.location));
        }
        for v in self.camera.violations() {
            push(&mut out, v.kind, format!("camera.{}", v.location));
        }
        out
    }
}
