//! Exact JSON form of a pose: the readable 4×4 matrix alongside the
//! quaternion and translation it was built from, so reloading is bit-exact.

use carm_core::geometry::{RigidTransform, Vec3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub matrix: [[f64; 4]; 4],
    pub quaternion_wxyz: [f64; 4],
    pub translation: [f64; 3],
}

impl From<&RigidTransform> for PoseRecord {
    fn from(t: &RigidTransform) -> Self {
        let tr = t.translation();
        Self {
            matrix: t.to_matrix(),
            quaternion_wxyz: t.quaternion_wxyz(),
            translation: [tr.x, tr.y, tr.z],
        }
    }
}

impl PoseRecord {
    /// Rebuilds the pose from the quaternion and translation after checking
    /// that the matrix agrees with them.
    pub fn to_transform(&self) -> Result<RigidTransform, String> {
        let [x, y, z] = self.translation;
        let t = RigidTransform::from_quaternion_wxyz(self.quaternion_wxyz, Vec3::new(x, y, z));
        let err = t
            .to_matrix()
            .iter()
            .flatten()
            .zip(self.matrix.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if !(err <= 1e-9 * (1.0 + t.translation().norm())) {
            return Err(format!("matrix and quaternion disagree by {err:e}"));
        }
        Ok(t)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnyPose {
    Record(PoseRecord),
    Matrix(RigidTransform),
}

/// `#[serde(with = "crate::pose::exact")]`: writes a [`PoseRecord`], reads
/// either a record or a bare 4×4 matrix.
pub mod exact {
    use super::*;

    pub fn serialize<S: Serializer>(t: &RigidTransform, s: S) -> Result<S::Ok, S::Error> {
        PoseRecord::from(t).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RigidTransform, D::Error> {
        match AnyPose::deserialize(d)? {
            AnyPose::Record(r) => r.to_transform().map_err(serde::de::Error::custom),
            AnyPose::Matrix(t) => Ok(t),
        }
    }
}
