//! Binary file formats.
//!
//! Every file starts with four magic bytes and a `u32` version, followed by
//! `u32` dimensions and a row-major payload. All numbers are little-endian.
//!
//! | kind           | magic  | dimensions   | payload                                   |
//! |----------------|--------|--------------|-------------------------------------------|
//! | 3D poses       | `SP3D` | n, p         | f64, frame / joint / xyz                  |
//! | 2D poses       | `SP2D` | n, p         | f64, frame / joint / xy                   |
//! | heat maps      | `SPHM` | n, p, H, W   | f32, frame / joint / row / col            |
//! | dictionary     | `SPDC` | k, p         | f64, atom / joint / xyz, then skeleton    |
//! | estimate       | `SPES` | n, k         | f64 codes (frame / atom), rotations (frame / 3x3 row-major), translations (frame / xy) |
//!
//! The dictionary payload ends with a `u32` byte length and the skeleton as
//! UTF-8 JSON. Heat maps whose mass is off from one by more than
//! [`MASS_TOLERANCE`] are renormalized with a warning; maps within the
//! tolerance are returned exactly as stored.

use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, Matrix2xX, Matrix3, Matrix3xX, Vector2};

use crate::error::{Error, FormatError, Result};
use crate::types::{
    CameraTrajectory, CoeffSequence, GridGeometry, HeatMapStack, Pose3D, Pose3DSequence,
    Pose2DSequence, PoseDictionary, SkeletonSpec,
};

pub const VERSION: u32 = 1;
pub const MAGIC_POSE3D: [u8; 4] = *b"SP3D";
pub const MAGIC_POSE2D: [u8; 4] = *b"SP2D";
pub const MAGIC_HEATMAPS: [u8; 4] = *b"SPHM";
pub const MAGIC_DICTIONARY: [u8; 4] = *b"SPDC";
pub const MAGIC_ESTIMATE: [u8; 4] = *b"SPES";

/// Largest tolerated deviation of a stored heat map's mass from one.
pub const MASS_TOLERANCE: f64 = 1e-3;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: [u8; 4], dims: &[usize]) -> Result<Self> {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(&magic);
        w.u32(VERSION);
        for &d in dims {
            let d = u32::try_from(d)
                .map_err(|_| FormatError::InvalidDimensions(format!("{d} does not fit in u32")))?;
            w.u32(d);
        }
        Ok(w)
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: [u8; 4]) -> std::result::Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let found: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        if found != magic {
            return Err(FormatError::BadMagic {
                expected: magic,
                found,
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::UnexpectedEof)?;
        let s = self.bytes.get(self.pos..end).ok_or(FormatError::UnexpectedEof)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    /// Reads `count` dimensions, each required to be positive.
    fn dims<const N: usize>(
        &mut self,
        names: [&str; N],
    ) -> std::result::Result<[usize; N], FormatError> {
        let mut out = [0; N];
        for (o, name) in out.iter_mut().zip(names) {
            let v = self.u32()? as usize;
            if v == 0 {
                return Err(FormatError::InvalidDimensions(format!("{name} is 0")));
            }
            *o = v;
        }
        Ok(out)
    }

    /// Checks that `count` elements of `width` bytes remain before any
    /// allocation happens.
    fn expect(&self, count: usize, width: usize) -> std::result::Result<(), FormatError> {
        let need = count
            .checked_mul(width)
            .ok_or_else(|| FormatError::InvalidDimensions("payload size overflows".into()))?;
        if self.bytes.len() - self.pos < need {
            return Err(FormatError::UnexpectedEof);
        }
        Ok(())
    }

    fn f64s(&mut self, count: usize) -> std::result::Result<Vec<f64>, FormatError> {
        self.expect(count, 8)?;
        let raw = self.take(count * 8)?;
        raw.chunks_exact(8)
            .enumerate()
            .map(|(i, c)| {
                let v = f64::from_le_bytes(c.try_into().expect("eight bytes"));
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(FormatError::NonFinite(i))
                }
            })
            .collect()
    }

    fn f32s(&mut self, count: usize) -> std::result::Result<Vec<f32>, FormatError> {
        self.expect(count, 4)?;
        let raw = self.take(count * 4)?;
        raw.chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let v = f32::from_le_bytes(c.try_into().expect("four bytes"));
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(FormatError::NonFinite(i))
                }
            })
            .collect()
    }

    fn finish(&self) -> std::result::Result<(), FormatError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            extra => Err(FormatError::TrailingBytes(extra)),
        }
    }
}

fn product(dims: &[usize]) -> std::result::Result<usize, FormatError> {
    dims.iter().try_fold(1usize, |a, &b| {
        a.checked_mul(b)
            .ok_or_else(|| FormatError::InvalidDimensions("payload size overflows".into()))
    })
}

fn uniform_joints(counts: impl Iterator<Item = usize>, p: usize) -> Result<()> {
    for (t, c) in counts.enumerate() {
        if c != p {
            return Err(Error::DimensionMismatch(format!(
                "frame {t} has {c} joints, expected {p}"
            )));
        }
    }
    Ok(())
}

fn nonempty(n: usize, p: usize) -> Result<()> {
    if n == 0 || p == 0 {
        return Err(FormatError::InvalidDimensions(format!("{n} frames of {p} joints")).into());
    }
    Ok(())
}

pub fn encode_pose3d(seq: &Pose3DSequence) -> Result<Vec<u8>> {
    let (n, p) = (seq.len(), seq.joint_count());
    nonempty(n, p)?;
    uniform_joints(seq.frames.iter().map(Pose3D::joint_count), p)?;
    let mut w = Writer::new(MAGIC_POSE3D, &[n, p])?;
    for f in &seq.frames {
        f.coords.iter().for_each(|&v| w.f64(v));
    }
    Ok(w.buf)
}

pub fn decode_pose3d(bytes: &[u8]) -> Result<Pose3DSequence> {
    let mut r = Reader::new(bytes, MAGIC_POSE3D)?;
    let [n, p] = r.dims(["frame count", "joint count"])?;
    let v = r.f64s(product(&[n, p, 3])?)?;
    r.finish()?;
    Ok(Pose3DSequence::new(
        v.chunks_exact(3 * p)
            .map(|c| Pose3D::new(Matrix3xX::from_column_slice(c)))
            .collect(),
    ))
}

pub fn encode_pose2d(seq: &Pose2DSequence) -> Result<Vec<u8>> {
    let (n, p) = (seq.len(), seq.joint_count());
    nonempty(n, p)?;
    uniform_joints(seq.frames.iter().map(|f| f.ncols()), p)?;
    let mut w = Writer::new(MAGIC_POSE2D, &[n, p])?;
    for f in &seq.frames {
        f.iter().for_each(|&v| w.f64(v));
    }
    Ok(w.buf)
}

pub fn decode_pose2d(bytes: &[u8]) -> Result<Pose2DSequence> {
    let mut r = Reader::new(bytes, MAGIC_POSE2D)?;
    let [n, p] = r.dims(["frame count", "joint count"])?;
    let v = r.f64s(product(&[n, p, 2])?)?;
    r.finish()?;
    Ok(Pose2DSequence::new(
        v.chunks_exact(2 * p).map(Matrix2xX::from_column_slice).collect(),
    ))
}

/// Values are stored as `f32`; the cast rounds to nearest.
pub fn encode_heatmaps(maps: &HeatMapStack) -> Result<Vec<u8>> {
    nonempty(maps.frames, maps.joints)?;
    let dims = [maps.frames, maps.joints, maps.grid.height, maps.grid.width];
    if maps.data.len() != product(&dims)? {
        return Err(Error::DimensionMismatch(format!(
            "{} heat-map values for dimensions {dims:?}",
            maps.data.len()
        )));
    }
    let mut w = Writer::new(MAGIC_HEATMAPS, &dims)?;
    maps.data.iter().for_each(|&v| w.f32(v as f32));
    Ok(w.buf)
}

pub fn decode_heatmaps(bytes: &[u8]) -> Result<HeatMapStack> {
    let mut r = Reader::new(bytes, MAGIC_HEATMAPS)?;
    let [n, p, h, wd] = r.dims(["frame count", "joint count", "grid height", "grid width"])?;
    let raw = r.f32s(product(&[n, p, h, wd])?)?;
    r.finish()?;
    let mut maps = HeatMapStack {
        frames: n,
        joints: p,
        grid: GridGeometry::new(h, wd),
        data: raw.into_iter().map(f64::from).collect(),
    };
    let mut renormalized = 0;
    let mut worst: f64 = 0.0;
    for t in 0..n {
        for j in 0..p {
            let m = maps.map_mut(t, j);
            if m.iter().any(|&v| v < 0.0) {
                return Err(FormatError::NegativeMass { frame: t, joint: j }.into());
            }
            let mass: f64 = m.iter().sum();
            if mass <= 0.0 {
                return Err(FormatError::ZeroMass { frame: t, joint: j }.into());
            }
            let off = (mass - 1.0).abs();
            if off > MASS_TOLERANCE {
                m.iter_mut().for_each(|v| *v /= mass);
                renormalized += 1;
                worst = worst.max(off);
            }
        }
    }
    if renormalized > 0 {
        warn!("renormalized {renormalized} heat maps (largest mass error {worst:.3e})");
    }
    Ok(maps)
}

pub fn encode_dictionary(dict: &PoseDictionary) -> Result<Vec<u8>> {
    let (k, p) = (dict.atom_count(), dict.joint_count());
    if k == 0 || p == 0 {
        return Err(FormatError::InvalidDimensions(format!("{k} atoms of {p} joints")).into());
    }
    uniform_joints(dict.atoms.iter().map(|a| a.ncols()), p)?;
    let mut w = Writer::new(MAGIC_DICTIONARY, &[k, p])?;
    for a in &dict.atoms {
        a.iter().for_each(|&v| w.f64(v));
    }
    let meta = serde_json::to_vec(&dict.skeleton).map_err(|e| FormatError::Metadata(e.to_string()))?;
    let len = u32::try_from(meta.len())
        .map_err(|_| FormatError::Metadata("skeleton description too long".into()))?;
    w.u32(len);
    w.buf.extend_from_slice(&meta);
    Ok(w.buf)
}

/// Atoms are stored as written; they are not rescaled on read.
pub fn decode_dictionary(bytes: &[u8]) -> Result<PoseDictionary> {
    let mut r = Reader::new(bytes, MAGIC_DICTIONARY)?;
    let [k, p] = r.dims(["atom count", "joint count"])?;
    let v = r.f64s(product(&[k, p, 3])?)?;
    let len = r.u32()? as usize;
    let meta = r.take(len)?;
    r.finish()?;
    let skeleton: SkeletonSpec =
        serde_json::from_slice(meta).map_err(|e| FormatError::Metadata(e.to_string()))?;
    if skeleton.joint_count() != p {
        return Err(FormatError::Metadata(format!(
            "skeleton has {} joints, atoms have {p}",
            skeleton.joint_count()
        ))
        .into());
    }
    let dict = PoseDictionary {
        atoms: v.chunks_exact(3 * p).map(Matrix3xX::from_column_slice).collect(),
        skeleton,
    };
    crate::validate::Validate::check(&dict)?;
    Ok(dict)
}

/// Codes and camera of a solved sequence; the dictionary is stored
/// separately.
pub fn encode_estimate(coeffs: &CoeffSequence, camera: &CameraTrajectory) -> Result<Vec<u8>> {
    let (k, n) = (coeffs.atom_count(), coeffs.frame_count());
    nonempty(n, k)?;
    if camera.rotations.len() != n || camera.translations.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} coefficient frames vs {} camera frames",
            camera.rotations.len()
        )));
    }
    let mut w = Writer::new(MAGIC_ESTIMATE, &[n, k])?;
    coeffs.values.iter().for_each(|&v| w.f64(v));
    for r in &camera.rotations {
        for i in 0..3 {
            for j in 0..3 {
                w.f64(r[(i, j)]);
            }
        }
    }
    for t in &camera.translations {
        w.f64(t.x);
        w.f64(t.y);
    }
    Ok(w.buf)
}

pub fn decode_estimate(bytes: &[u8]) -> Result<(CoeffSequence, CameraTrajectory)> {
    let mut r = Reader::new(bytes, MAGIC_ESTIMATE)?;
    let [n, k] = r.dims(["frame count", "atom count"])?;
    let codes = r.f64s(product(&[n, k])?)?;
    let rots = r.f64s(product(&[n, 9])?)?;
    let trans = r.f64s(product(&[n, 2])?)?;
    r.finish()?;
    let camera = CameraTrajectory {
        rotations: rots.chunks_exact(9).map(Matrix3::from_row_slice).collect(),
        translations: trans.chunks_exact(2).map(|c| Vector2::new(c[0], c[1])).collect(),
    };
    Ok((
        CoeffSequence {
            values: DMatrix::from_column_slice(k, n, &codes),
        },
        camera,
    ))
}

fn save(path: &Path, bytes: Vec<u8>) -> Result<()> {
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_pose3d(path: &Path, seq: &Pose3DSequence) -> Result<()> {
    save(path, encode_pose3d(seq)?)
}

pub fn read_pose3d(path: &Path) -> Result<Pose3DSequence> {
    decode_pose3d(&fs::read(path)?)
}

pub fn write_pose2d(path: &Path, seq: &Pose2DSequence) -> Result<()> {
    save(path, encode_pose2d(seq)?)
}

pub fn read_pose2d(path: &Path) -> Result<Pose2DSequence> {
    decode_pose2d(&fs::read(path)?)
}

pub fn write_heatmaps(path: &Path, maps: &HeatMapStack) -> Result<()> {
    save(path, encode_heatmaps(maps)?)
}

pub fn read_heatmaps(path: &Path) -> Result<HeatMapStack> {
    decode_heatmaps(&fs::read(path)?)
}

pub fn write_dictionary(path: &Path, dict: &PoseDictionary) -> Result<()> {
    save(path, encode_dictionary(dict)?)
}

pub fn read_dictionary(path: &Path) -> Result<PoseDictionary> {
    decode_dictionary(&fs::read(path)?)
}

pub fn write_estimate(path: &Path, coeffs: &CoeffSequence, camera: &CameraTrajectory) -> Result<()> {
    save(path, encode_estimate(coeffs, camera)?)
}

pub fn read_estimate(path: &Path) -> Result<(CoeffSequence, CameraTrajectory)> {
    decode_estimate(&fs::read(path)?)
}
