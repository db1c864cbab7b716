//! Session configuration, loaded from JSON.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use carm_core::depth::CameraIntrinsics;
use carm_core::evaluation::MethodArm;
use carm_core::geometry::{RigidTransform, Vec3};
use carm_core::icp::{AlignmentBands, IcpParams};
use carm_core::kinematics::{CArmDofs, CArmGeometry, Keypoint3D};
use carm_core::tracker::Landmark;
use serde::{Deserialize, Serialize};

/// Environment variable that overrides the config path.
pub const CONFIG_ENV: &str = "CARM_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub geometry: CArmGeometry,
    pub intrinsics: CameraIntrinsics,
    /// `technician_from_sensor`.
    #[serde(with = "crate::pose::exact")]
    pub ir_extrinsic: RigidTransform,
    /// Initial `world_from_technician`.
    #[serde(with = "crate::pose::exact")]
    pub technician_pose: RigidTransform,
    /// World landmarks the head tracker observes.
    pub landmarks: Vec<Landmark>,
    /// Phantom keypoints projected by simulated X-ray acquisitions.
    pub keypoints: Vec<Keypoint3D>,
    /// Extra or overriding DOF presets by name.
    pub presets: BTreeMap<String, CArmDofs>,
    pub icp: IcpParams,
    pub bands: AlignmentBands,
    /// Depth noise standard deviation, mm.
    pub depth_noise_sigma: f64,
    /// Point budget for clouds sent to clients.
    pub snapshot_max_points: usize,
    pub seed: u64,
    /// Run label and method arm for study events recorded by the session.
    pub run: String,
    pub arm: MethodArm,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            geometry: CArmGeometry::default(),
            intrinsics: CameraIntrinsics::default(),
            ir_extrinsic: RigidTransform::from_translation(0.0, 0.0, 40.0),
            technician_pose: RigidTransform::look_at(
                Vec3::new(400.0, -2000.0, 300.0),
                Vec3::new(400.0, 0.0, -200.0),
                Vec3::z(),
            ),
            landmarks: default_landmarks(),
            keypoints: default_keypoints(),
            presets: BTreeMap::new(),
            icp: IcpParams::default(),
            bands: AlignmentBands::default(),
            depth_noise_sigma: 0.0,
            snapshot_max_points: 20_000,
            seed: 0,
            run: "session".to_string(),
            arm: MethodArm::Proposed,
        }
    }
}

/// Two staggered walls of markers behind the device.
fn default_landmarks() -> Vec<Landmark> {
    let mut out = Vec::new();
    for (row, z) in [-800.0, 0.0, 800.0, 1600.0].into_iter().enumerate() {
        for (col, x) in [-1600.0, -800.0, 0.0, 800.0, 1600.0, 2400.0].into_iter().enumerate() {
            let y = if (row + col) % 2 == 0 { 2000.0 } else { 3000.0 };
            out.push(Landmark {
                id: format!("L{row}{col}"),
                position: Vec3::new(x, y, z),
            });
        }
    }
    out
}

/// Radiopaque markers around the isocenter.
fn default_keypoints() -> Vec<Keypoint3D> {
    [
        ("asis_left", Vec3::new(-60.0, 20.0, 30.0)),
        ("asis_right", Vec3::new(60.0, 20.0, 30.0)),
        ("symphysis", Vec3::new(0.0, -50.0, -20.0)),
        ("promontory", Vec3::new(0.0, 50.0, 40.0)),
    ]
    .into_iter()
    .map(|(id, position)| Keypoint3D { id: id.to_string(), position })
    .collect()
}

impl SimConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: SimConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `$CARM_CONFIG` if set, else `path`, else the defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self, ConfigError> {
        match std::env::var_os(CONFIG_ENV) {
            Some(p) => Self::load(Path::new(&p)),
            None => match path {
                Some(p) => Self::load(p),
                None => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.geometry.validate().map_err(|e| bad(&e))?;
        self.intrinsics.validate().map_err(|e| bad(&e))?;
        self.icp.validate().map_err(|e| bad(&e))?;
        if !(self.depth_noise_sigma >= 0.0 && self.depth_noise_sigma.is_finite()) {
            return Err(ConfigError::Invalid("depth_noise_sigma must be finite and >= 0".into()));
        }
        if self.snapshot_max_points == 0 {
            return Err(ConfigError::Invalid("snapshot_max_points must be positive".into()));
        }
        for (name, dofs) in &self.presets {
            dofs.validate().map_err(|e| ConfigError::Invalid(format!("preset {name:?}: {e}")))?;
        }
        Ok(())
    }

    /// Config presets first, then the built-in ones.
    pub fn preset(&self, name: &str) -> Option<CArmDofs> {
        self.presets.get(name).copied().or_else(|| CArmDofs::preset(name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = SimConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: SimConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.geometry, cfg.geometry);
        assert_eq!(back.landmarks, cfg.landmarks);
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg: SimConfig = serde_json::from_str(r#"{"depth_noise_sigma": 1.5, "icp": {"max_iterations": 20}}"#).unwrap();
        assert_eq!(cfg.depth_noise_sigma, 1.5);
        assert_eq!(cfg.icp.max_iterations, 20);
        assert_eq!(cfg.icp.max_correspondence_distance, 150.0);
        assert_eq!(cfg.geometry, CArmGeometry::default());
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(serde_json::from_str::<SimConfig>(r#"{"colour": 1}"#).is_err());
    }
}
