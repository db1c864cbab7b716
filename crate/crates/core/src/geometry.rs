//! Coordinate frames, rigid transforms and the pose-difference metric.
//!
//! Transforms follow the `target_from_source` convention: a transform tagged
//! `(World, Technician)` maps technician-frame coordinates into the world
//! frame. Rotations are unit quaternions; translations are millimeters.

use alloc::vec::Vec;
use core::fmt;

use nalgebra::{Matrix3, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A 3-vector in millimeters.
pub type Vec3 = Vector3<f64>;

/// Named coordinate frames of the operating-room scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameId {
    World,
    Technician,
    #[serde(rename = "ir_sensor")]
    IrSensor,
    CArm,
    Detector,
    Display,
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            FrameId::World => "world",
            FrameId::Technician => "technician",
            FrameId::IrSensor => "ir_sensor",
            FrameId::CArm => "c_arm",
            FrameId::Detector => "detector",
            FrameId::Display => "display",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("frame mismatch: expected {expected}, found {found}")]
    FrameMismatch { expected: FrameId, found: FrameId },
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("matrix is not a rigid transform: {0}")]
    InvalidMatrix(&'static str),
}

/// Rigid body transform (rotation followed by translation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform, renormalizing the rotation.
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: renormalize(rotation.into_inner()),
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::new(x, y, z),
        }
    }

    /// Builds a transform from a quaternion in `(w, x, y, z)` order.
    pub fn from_quaternion_wxyz(wxyz: [f64; 4], translation: Vec3) -> Self {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        Self {
            rotation: renormalize(q),
            translation,
        }
    }

    /// Rotation of `degrees` about `axis` (any non-zero vector), no translation.
    pub fn from_axis_angle_deg(axis: Vec3, degrees: f64) -> Self {
        let axis = Unit::new_normalize(axis);
        Self::new(
            UnitQuaternion::from_axis_angle(&axis, degrees.to_radians()),
            Vec3::zeros(),
        )
    }

    /// Rotation given as a rotation vector (axis times angle, radians).
    pub fn from_rotation_vector(rotvec: Vec3, translation: Vec3) -> Self {
        Self::new(UnitQuaternion::from_scaled_axis(rotvec), translation)
    }

    pub fn rx_deg(degrees: f64) -> Self {
        Self::from_axis_angle_deg(Vec3::x(), degrees)
    }

    pub fn ry_deg(degrees: f64) -> Self {
        Self::from_axis_angle_deg(Vec3::y(), degrees)
    }

    pub fn rz_deg(degrees: f64) -> Self {
        Self::from_axis_angle_deg(Vec3::z(), degrees)
    }

    /// Camera-style pose (z forward, y down) at `eye` looking at `target`;
    /// `up` is the world direction that should appear upward in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let z = (target - eye).normalize();
        let x = (-up).cross(&z).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_columns(&[x, y, z]);
        Self::new(
            UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r)),
            eye,
        )
    }

    /// Same rotation, translation replaced.
    pub fn with_translation(mut self, translation: Vec3) -> Self {
        self.translation = translation;
        self
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Quaternion coefficients in `(w, x, y, z)` order.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    /// Rotation vector (axis times angle, radians).
    pub fn rotation_vector(&self) -> Vec3 {
        self.rotation.scaled_axis()
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let rotation = renormalize((self.rotation * other.rotation).into_inner());
        let translation = self.rotation * other.translation + self.translation;
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rotation = self.rotation.inverse();
        let translation = -(rotation * self.translation);
        RigidTransform {
            rotation,
            translation,
        }
    }

    /// `R·p + t`.
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Rotation only, `R·v`.
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Geodesic rotation angle in degrees, in `[0, 180]`.
    pub fn angle_deg(&self) -> f64 {
        let q = self.rotation.quaternion();
        let v = libm::sqrt(q.i * q.i + q.j * q.j + q.k * q.k);
        (2.0 * libm::atan2(v, libm::fabs(q.w))).to_degrees()
    }

    /// Row-major homogeneous 4×4 matrix.
    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let r = self.rotation_matrix();
        let t = self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Parses a row-major homogeneous matrix; the rotation block must be
    /// orthonormal with determinant +1 within 1e-6.
    pub fn from_matrix(m: &[[f64; 4]; 4]) -> Result<RigidTransform, GeometryError> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidMatrix("non-finite entry"));
        }
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::InvalidMatrix("last row must be [0, 0, 0, 1]"));
        }
        let r = Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        );
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        if orth > 1e-6 {
            return Err(GeometryError::InvalidMatrix("rotation block is not orthonormal"));
        }
        if r.determinant() < 0.0 {
            return Err(GeometryError::InvalidMatrix("rotation block is a reflection"));
        }
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        Ok(RigidTransform::new(
            rotation,
            Vec3::new(m[0][3], m[1][3], m[2][3]),
        ))
    }

    /// Largest deviation from identity, as `(angle in degrees, translation in mm)`.
    pub fn deviation_from_identity(&self) -> (f64, f64) {
        (self.angle_deg(), self.translation.norm())
    }
}

fn renormalize(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    // Keep w >= 0 so that equal rotations share one representation.
    let q = if q.w < 0.0 { -q } else { q };
    // Already-unit input is kept as is, so stored quaternions reload bit-exactly.
    if libm::fabs(q.norm_squared() - 1.0) <= 4.0 * f64::EPSILON {
        UnitQuaternion::new_unchecked(q)
    } else {
        UnitQuaternion::new_normalize(q)
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_matrix().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let m = <[[f64; 4]; 4]>::deserialize(deserializer)?;
        RigidTransform::from_matrix(&m).map_err(serde::de::Error::custom)
    }
}

/// `a ∘ b`: the result applies `b` then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// A rigid transform bound to the frames it connects: maps `source`
/// coordinates into `target` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTransform {
    pub target: FrameId,
    pub source: FrameId,
    pub transform: RigidTransform,
}

impl FrameTransform {
    pub fn new(target: FrameId, source: FrameId, transform: RigidTransform) -> Self {
        Self {
            target,
            source,
            transform,
        }
    }

    /// Chains `self` (source B → target A) after `inner` (source C → target B).
    pub fn then_from(&self, inner: &FrameTransform) -> Result<FrameTransform, GeometryError> {
        if self.source != inner.target {
            return Err(GeometryError::FrameMismatch {
                expected: self.source,
                found: inner.target,
            });
        }
        Ok(FrameTransform {
            target: self.target,
            source: inner.source,
            transform: self.transform.compose(&inner.transform),
        })
    }

    pub fn inverse(&self) -> FrameTransform {
        FrameTransform {
            target: self.source,
            source: self.target,
            transform: self.transform.inverse(),
        }
    }

    pub fn apply_to_point(&self, p: &Vec3, from: FrameId, to: FrameId) -> Result<Vec3, GeometryError> {
        if from != self.source {
            return Err(GeometryError::FrameMismatch {
                expected: self.source,
                found: from,
            });
        }
        if to != self.target {
            return Err(GeometryError::FrameMismatch {
                expected: self.target,
                found: to,
            });
        }
        Ok(self.transform.apply(p))
    }
}

/// Maps `p` from frame `from` to frame `to`, rejecting mismatched frames.
pub fn apply_to_point(
    t: &FrameTransform,
    p: &Vec3,
    from: FrameId,
    to: FrameId,
) -> Result<Vec3, GeometryError> {
    t.apply_to_point(p, from, to)
}

/// Translational and rotational difference between two poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseDelta {
    /// Euclidean distance between the translations, mm.
    pub distance: f64,
    /// Geodesic angle of the relative rotation, degrees in `[0, 180]`.
    pub angle: f64,
}

impl PoseDelta {
    /// `distance + weight·angle`, a single number for "how far off".
    pub fn scalarized(&self, mm_per_degree: f64) -> f64 {
        self.distance + mm_per_degree * self.angle
    }
}

/// Pose difference. The angle equals `acos((trace(Ra^T Rb) - 1) / 2)`; it is
/// computed from the quaternion chord so it stays accurate near zero and is
/// exactly symmetric in its arguments.
pub fn pose_delta(a: &RigidTransform, b: &RigidTransform) -> PoseDelta {
    let distance = (a.translation - b.translation).norm();
    let qa = a.rotation.quaternion().coords;
    let qb = b.rotation.quaternion().coords;
    let dot = qa[0] * qb[0] + qa[1] * qb[1] + qa[2] * qb[2] + qa[3] * qb[3];
    let qb = if dot < 0.0 { -qb } else { qb };
    let chord = (qa - qb).norm();
    let span = (qa + qb).norm();
    let angle = (4.0 * libm::atan2(chord, span)).to_degrees().clamp(0.0, 180.0);
    PoseDelta { distance, angle }
}

/// Points bound to the coordinate frame they are expressed in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedPointCloud {
    frame: FrameId,
    points: Vec<Vec3>,
    /// Acquisition time, seconds.
    timestamp: f64,
}

impl TaggedPointCloud {
    /// Rejects non-finite coordinates. Empty clouds are allowed here; storage
    /// and registration check for emptiness themselves.
    pub fn new(frame: FrameId, points: Vec<Vec3>, timestamp: f64) -> Result<Self, GeometryError> {
        if let Some(index) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::NonFinite { index });
        }
        Ok(Self {
            frame,
            points,
            timestamp,
        })
    }

    pub fn frame(&self) -> FrameId {
        self.frame
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn ensure_frame(&self, frame: FrameId) -> Result<(), GeometryError> {
        if self.frame != frame {
            return Err(GeometryError::FrameMismatch {
                expected: frame,
                found: self.frame,
            });
        }
        Ok(())
    }

    pub fn ensure_non_empty(&self) -> Result<(), GeometryError> {
        if self.points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        Ok(())
    }

    /// Re-expresses the cloud in `t.target`; the cloud must be in `t.source`.
    pub fn transformed(&self, t: &FrameTransform) -> Result<TaggedPointCloud, GeometryError> {
        self.ensure_frame(t.source)?;
        Ok(TaggedPointCloud {
            frame: t.target,
            points: self.points.iter().map(|p| t.transform.apply(p)).collect(),
            timestamp: self.timestamp,
        })
    }

    /// Relabels the frame without moving points (e.g. Technician → Display).
    pub fn relabeled(mut self, frame: FrameId) -> TaggedPointCloud {
        self.frame = frame;
        self
    }

    /// Keeps every k-th point so that at most `max_points` remain.
    pub fn decimated(&self, max_points: usize) -> TaggedPointCloud {
        if self.points.len() <= max_points || max_points == 0 {
            let mut out = self.clone();
            if max_points == 0 {
                out.points.clear();
            }
            return out;
        }
        let stride = self.points.len().div_ceil(max_points);
        TaggedPointCloud {
            frame: self.frame,
            points: self.points.iter().step_by(stride).copied().collect(),
            timestamp: self.timestamp,
        }
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
        Some(sum / self.points.len() as f64)
    }
}
