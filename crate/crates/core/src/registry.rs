//! Named C-arm views stored as world-frame point clouds.
//!
//! Saving maps each sensor point through `world_from_technician ∘
//! technician_from_sensor`; showing maps the stored world cloud into the
//! current technician frame with the inverse of the current tracker pose.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::evaluation::KeypointSet;
use crate::geometry::{FrameId, FrameTransform, GeometryError, RigidTransform, TaggedPointCloud};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistryError {
    #[error("cannot save an empty point cloud")]
    EmptyCloud,
    #[error(transparent)]
    Frame(#[from] GeometryError),
    #[error("unknown view {0:?}")]
    UnknownView(String),
    #[error("view name must not be empty")]
    EmptyName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedView {
    pub name: String,
    /// Calibration time of the view, seconds.
    pub t0: f64,
    /// Stored cloud, frame `World`.
    pub cloud: TaggedPointCloud,
    /// `world_from_technician` at `t0`.
    pub tracker_pose: RigidTransform,
    /// `technician_from_sensor` used at `t0`.
    pub ir_extrinsic: RigidTransform,
    /// Keypoints of the reference X-ray taken when the view was defined.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_keypoints: Option<KeypointSet>,
    /// Simulator ground-truth gantry pose (`world_from_carm`) at `t0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_gantry: Option<RigidTransform>,
}

impl SavedView {
    /// `world_from_sensor` at save time.
    pub fn world_from_sensor(&self) -> RigidTransform {
        self.tracker_pose.compose(&self.ir_extrinsic)
    }
}

/// Maps a sensor cloud into the world frame and wraps it as a view.
pub fn save_view(
    name: &str,
    sensor_cloud: &TaggedPointCloud,
    tracker_pose: &RigidTransform,
    ir_extrinsic: &RigidTransform,
    t0: f64,
) -> Result<SavedView, RegistryError> {
    if name.is_empty() {
        return Err(RegistryError::EmptyName);
    }
    sensor_cloud.ensure_frame(FrameId::IrSensor)?;
    if sensor_cloud.is_empty() {
        return Err(RegistryError::EmptyCloud);
    }
    let world_from_tech = FrameTransform::new(FrameId::World, FrameId::Technician, *tracker_pose);
    let tech_from_sensor = FrameTransform::new(FrameId::Technician, FrameId::IrSensor, *ir_extrinsic);
    let world_from_sensor = world_from_tech.then_from(&tech_from_sensor)?;
    let world = sensor_cloud.transformed(&world_from_sensor)?;
    let cloud = TaggedPointCloud::new(FrameId::World, world.into_points(), t0)?;
    Ok(SavedView {
        name: name.to_string(),
        t0,
        cloud,
        tracker_pose: *tracker_pose,
        ir_extrinsic: *ir_extrinsic,
        reference_keypoints: None,
        ground_truth_gantry: None,
    })
}

/// Re-expresses a stored view in the technician frame for `current_tracker_pose`.
pub fn show_view(view: &SavedView, current_tracker_pose: &RigidTransform) -> Result<TaggedPointCloud, RegistryError> {
    let tech_from_world =
        FrameTransform::new(FrameId::World, FrameId::Technician, *current_tracker_pose).inverse();
    Ok(view.cloud.transformed(&tech_from_world)?)
}

/// Views keyed by name, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewRegistry {
    views: BTreeMap<String, SavedView>,
}

impl ViewRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `view`, replacing (with a warning) any view of the same name.
    pub fn insert(&mut self, view: SavedView) -> Option<SavedView> {
        let replaced = self.views.insert(view.name.clone(), view);
        if let Some(old) = &replaced {
            log::warn!("view {:?} replaced (previous t0 = {})", old.name, old.t0);
        }
        replaced
    }

    pub fn save(
        &mut self,
        name: &str,
        sensor_cloud: &TaggedPointCloud,
        tracker_pose: &RigidTransform,
        ir_extrinsic: &RigidTransform,
        t0: f64,
    ) -> Result<&SavedView, RegistryError> {
        let view = save_view(name, sensor_cloud, tracker_pose, ir_extrinsic, t0)?;
        self.insert(view);
        Ok(&self.views[name])
    }

    pub fn show(&self, name: &str, current_tracker_pose: &RigidTransform) -> Result<TaggedPointCloud, RegistryError> {
        show_view(self.get(name)?, current_tracker_pose)
    }

    pub fn get(&self, name: &str) -> Result<&SavedView, RegistryError> {
        self.views
            .get(name)
            .ok_or_else(|| RegistryError::UnknownView(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut SavedView, RegistryError> {
        self.views
            .get_mut(name)
            .ok_or_else(|| RegistryError::UnknownView(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.views.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.views.keys().map(String::as_str).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SavedView> {
        self.views.values()
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}
