//! Parametric mobile C-arm: degrees of freedom to gantry pose, surface
//! sampling, X-ray keypoint projection and DOF adjustment hints.
//!
//! World frame: z up, isocenter at the origin for neutral DOFs. The gantry
//! (`CArm`) frame has its origin at the isocenter with the beam along +z:
//! source at `−source_to_isocenter`, detector plane at
//! `source_to_detector − source_to_isocenter`.
//!
//! Kinematic chain, outermost first:
//! base translation (x, y) → wheel yaw about world z → column lift (z) →
//! swivel about the column axis → angular tilt about gantry x → orbital
//! rotation about gantry y.

use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{SMatrix, SVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{FrameId, RigidTransform, TaggedPointCloud, Vec3};
use crate::surface::{PlacedPrimitive, Primitive};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KinematicsError {
    #[error("{dof} = {value} outside [{min}, {max}]")]
    DofOutOfRange {
        dof: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid C-arm geometry: {0}")]
    InvalidGeometry(&'static str),
    #[error("point is not in front of the X-ray source")]
    BehindSource,
    #[error("adjustment too large for a local hint ({angle_deg:.2} deg, {distance_mm:.1} mm)")]
    HintOutOfRange { angle_deg: f64, distance_mm: f64 },
    #[error("no reliable hint: Jacobian condition ratio {ratio:.3e}")]
    NoReliableHint { ratio: f64 },
}

pub const DOF_COUNT: usize = 7;

/// Names in the canonical DOF order used by [`CArmDofs::to_array`].
pub const DOF_NAMES: [&str; DOF_COUNT] = [
    "base_x",
    "base_y",
    "column_height",
    "wheel_yaw",
    "orbital",
    "angular_tilt",
    "swivel",
];

const DOF_LIMITS: [(f64, f64); DOF_COUNT] = [
    (f64::NEG_INFINITY, f64::INFINITY),
    (f64::NEG_INFINITY, f64::INFINITY),
    (0.0, 450.0),
    (-180.0, 180.0),
    (-95.0, 95.0),
    (-190.0, 190.0),
    (-12.0, 12.0),
];

/// Device degrees of freedom. Lengths in mm, angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CArmDofs {
    pub base_x: f64,
    pub base_y: f64,
    pub column_height: f64,
    pub wheel_yaw: f64,
    pub orbital: f64,
    pub angular_tilt: f64,
    pub swivel: f64,
}

impl CArmDofs {
    pub fn neutral() -> Self {
        Self::default()
    }

    pub fn to_array(&self) -> [f64; DOF_COUNT] {
        [
            self.base_x,
            self.base_y,
            self.column_height,
            self.wheel_yaw,
            self.orbital,
            self.angular_tilt,
            self.swivel,
        ]
    }

    pub fn from_array(a: [f64; DOF_COUNT]) -> Self {
        Self {
            base_x: a[0],
            base_y: a[1],
            column_height: a[2],
            wheel_yaw: a[3],
            orbital: a[4],
            angular_tilt: a[5],
            swivel: a[6],
        }
    }

    /// Inclusive `(min, max)` range of the DOF at `index`.
    pub fn limits(index: usize) -> (f64, f64) {
        DOF_LIMITS[index]
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        for (i, value) in self.to_array().into_iter().enumerate() {
            let (min, max) = DOF_LIMITS[i];
            if !value.is_finite() || value < min || value > max {
                return Err(KinematicsError::DofOutOfRange {
                    dof: DOF_NAMES[i],
                    value,
                    min,
                    max,
                });
            }
        }
        Ok(())
    }

    pub fn added(&self, increment: &CArmDofs) -> CArmDofs {
        let a = self.to_array();
        let b = increment.to_array();
        CArmDofs::from_array(core::array::from_fn(|i| a[i] + b[i]))
    }

    /// Clamps every DOF into its range.
    pub fn clamped(&self) -> CArmDofs {
        let a = self.to_array();
        CArmDofs::from_array(core::array::from_fn(|i| a[i].clamp(DOF_LIMITS[i].0, DOF_LIMITS[i].1)))
    }

    /// Sets one DOF by name.
    pub fn with_dof(&self, name: &str, value: f64) -> Option<CArmDofs> {
        let idx = DOF_NAMES.iter().position(|n| *n == name)?;
        let mut a = self.to_array();
        a[idx] = value;
        Some(CArmDofs::from_array(a))
    }

    /// Built-in clinical angulation fixtures. These are plausible settings,
    /// not measured clinical values.
    pub fn preset(name: &str) -> Option<CArmDofs> {
        let n = CArmDofs::neutral();
        Some(match name {
            "neutral" => n,
            "inlet" => CArmDofs { angular_tilt: -40.0, ..n },
            "outlet" => CArmDofs { angular_tilt: 40.0, ..n },
            "cranial_oblique" => CArmDofs { wheel_yaw: 45.0, angular_tilt: -20.0, ..n },
            "caudal_oblique" => CArmDofs { wheel_yaw: -45.0, angular_tilt: 20.0, ..n },
            "cranial_oblique_opposing" => CArmDofs { wheel_yaw: -45.0, angular_tilt: -20.0, ..n },
            "caudal_oblique_opposing" => CArmDofs { wheel_yaw: 45.0, angular_tilt: 20.0, ..n },
            _ => return None,
        })
    }

    pub fn preset_names() -> [&'static str; 7] {
        [
            "neutral",
            "inlet",
            "outlet",
            "cranial_oblique",
            "caudal_oblique",
            "cranial_oblique_opposing",
            "caudal_oblique_opposing",
        ]
    }
}

/// Physical device geometry, all lengths in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CArmGeometry {
    pub source_to_isocenter: f64,
    /// Source-to-image (detector) distance.
    pub source_to_detector: f64,
    pub detector_pixels: (u32, u32),
    /// mm per pixel.
    pub pixel_pitch: f64,
    /// Radius of the C-arc centerline around the isocenter.
    pub arc_radius: f64,
    /// Tube radius of the C-arc.
    pub arc_tube_radius: f64,
    pub arc_span_deg: f64,
    /// Horizontal distance from isocenter to the column axis (gantry x).
    pub column_offset: f64,
    pub column_radius: f64,
    /// Column top relative to the isocenter height.
    pub column_top: f64,
    /// Floor height relative to the neutral isocenter (negative).
    pub floor_z: f64,
    pub base_half_extents: [f64; 3],
    /// Base box center x, along the column side.
    pub base_center_x: f64,
    pub detector_half_extents: [f64; 3],
    pub source_half_extents: [f64; 3],
}

impl Default for CArmGeometry {
    fn default() -> Self {
        Self {
            source_to_isocenter: 600.0,
            source_to_detector: 1000.0,
            detector_pixels: (1024, 1024),
            pixel_pitch: 0.3,
            arc_radius: 700.0,
            arc_tube_radius: 40.0,
            arc_span_deg: 180.0,
            column_offset: 1100.0,
            column_radius: 100.0,
            column_top: -100.0,
            floor_z: -1100.0,
            base_half_extents: [400.0, 300.0, 150.0],
            base_center_x: 1300.0,
            detector_half_extents: [180.0, 180.0, 50.0],
            source_half_extents: [100.0, 100.0, 100.0],
        }
    }
}

impl CArmGeometry {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        if !(self.source_to_isocenter > 0.0 && self.source_to_isocenter < self.source_to_detector) {
            return Err(KinematicsError::InvalidGeometry(
                "need 0 < source_to_isocenter < source_to_detector",
            ));
        }
        if !(self.pixel_pitch > 0.0) {
            return Err(KinematicsError::InvalidGeometry("pixel_pitch must be positive"));
        }
        if self.detector_pixels.0 == 0 || self.detector_pixels.1 == 0 {
            return Err(KinematicsError::InvalidGeometry("detector has no pixels"));
        }
        if !(self.arc_tube_radius > 0.0 && self.arc_tube_radius < self.arc_radius) {
            return Err(KinematicsError::InvalidGeometry("need 0 < arc_tube_radius < arc_radius"));
        }
        Ok(())
    }

    /// Detector-plane distance from the isocenter along the beam.
    pub fn isocenter_to_detector(&self) -> f64 {
        self.source_to_detector - self.source_to_isocenter
    }

    /// Magnification of the isocenter plane onto the detector.
    pub fn magnification(&self) -> f64 {
        self.source_to_detector / self.source_to_isocenter
    }

    /// Principal point, pixel coordinates of the detector center.
    pub fn principal_point(&self) -> (f64, f64) {
        (
            self.detector_pixels.0 as f64 / 2.0,
            self.detector_pixels.1 as f64 / 2.0,
        )
    }
}

/// Poses produced by [`forward_kinematics`], each `world_from_*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CArmPoses {
    /// Gantry frame (`CArm`), origin at the isocenter.
    pub gantry: RigidTransform,
    /// X-ray focal spot; z along the beam.
    pub source: RigidTransform,
    /// Detector center (`Detector`); z along the beam.
    pub detector: RigidTransform,
}

struct Chain {
    base: RigidTransform,
    lift: RigidTransform,
    gantry: RigidTransform,
}

fn chain(dofs: &CArmDofs, geom: &CArmGeometry) -> Chain {
    let base = RigidTransform::from_translation(dofs.base_x, dofs.base_y, 0.0)
        .compose(&RigidTransform::rz_deg(dofs.wheel_yaw));
    let lift = base.compose(&RigidTransform::from_translation(0.0, 0.0, dofs.column_height));
    let swivel = RigidTransform::from_translation(geom.column_offset, 0.0, 0.0)
        .compose(&RigidTransform::rz_deg(dofs.swivel))
        .compose(&RigidTransform::from_translation(-geom.column_offset, 0.0, 0.0));
    let gantry = lift
        .compose(&swivel)
        .compose(&RigidTransform::rx_deg(dofs.angular_tilt))
        .compose(&RigidTransform::ry_deg(dofs.orbital));
    Chain { base, lift, gantry }
}

fn poses_unchecked(dofs: &CArmDofs, geom: &CArmGeometry) -> CArmPoses {
    let gantry = chain(dofs, geom).gantry;
    CArmPoses {
        gantry,
        source: gantry.compose(&RigidTransform::from_translation(
            0.0,
            0.0,
            -geom.source_to_isocenter,
        )),
        detector: gantry.compose(&RigidTransform::from_translation(
            0.0,
            0.0,
            geom.isocenter_to_detector(),
        )),
    }
}

/// Gantry, source and detector poses in the world frame.
pub fn forward_kinematics(dofs: &CArmDofs, geom: &CArmGeometry) -> Result<CArmPoses, KinematicsError> {
    dofs.validate()?;
    geom.validate()?;
    Ok(poses_unchecked(dofs, geom))
}

/// Device surface primitives placed in the world frame. Order is fixed:
/// C-arc, source housing, detector housing, column, base.
pub fn surface_primitives(dofs: &CArmDofs, geom: &CArmGeometry) -> Result<Vec<PlacedPrimitive>, KinematicsError> {
    dofs.validate()?;
    geom.validate()?;
    Ok(placed_primitives(dofs, geom))
}

fn placed_primitives(dofs: &CArmDofs, geom: &CArmGeometry) -> Vec<PlacedPrimitive> {
    let c = chain(dofs, geom);
    // Torus local xy plane → gantry xz plane (local y → gantry z).
    let arc_local = RigidTransform::rx_deg(90.0);
    let half_span = geom.arc_span_deg / 2.0;
    let src_z = -geom.source_to_isocenter - geom.source_half_extents[2] + 50.0;
    let det_z = geom.isocenter_to_detector() + geom.detector_half_extents[2];
    let base_h = geom.base_half_extents;
    let column_bottom = geom.floor_z + 2.0 * base_h[2];
    Vec::from([
        PlacedPrimitive {
            pose: c.gantry.compose(&arc_local),
            primitive: Primitive::TorusSector {
                major: geom.arc_radius,
                minor: geom.arc_tube_radius,
                start_deg: -half_span,
                span_deg: geom.arc_span_deg,
            },
        },
        PlacedPrimitive {
            pose: c.gantry.compose(&RigidTransform::from_translation(0.0, 0.0, src_z)),
            primitive: Primitive::Box {
                half_extents: geom.source_half_extents,
            },
        },
        PlacedPrimitive {
            pose: c.gantry.compose(&RigidTransform::from_translation(0.0, 0.0, det_z)),
            primitive: Primitive::Box {
                half_extents: geom.detector_half_extents,
            },
        },
        PlacedPrimitive {
            pose: c.base.compose(&RigidTransform::from_translation(geom.column_offset, 0.0, 0.0)),
            primitive: Primitive::Cylinder {
                radius: geom.column_radius,
                z0: column_bottom,
                z1: (c.lift.translation() - c.base.translation()).z + geom.column_top,
            },
        },
        PlacedPrimitive {
            pose: c.base.compose(&RigidTransform::from_translation(
                geom.base_center_x,
                0.0,
                geom.floor_z + base_h[2],
            )),
            primitive: Primitive::Box { half_extents: base_h },
        },
    ])
}

/// Total device surface area at `dofs`, mm².
pub fn surface_area(dofs: &CArmDofs, geom: &CArmGeometry) -> Result<f64, KinematicsError> {
    Ok(surface_primitives(dofs, geom)?
        .iter()
        .map(|p| p.primitive.area())
        .sum())
}

/// Default sampling density, points per m².
pub const DEFAULT_SURFACE_DENSITY: f64 = 2000.0;

/// Stratified random samples of the device surface in the world frame.
/// `density` is in points per m². Deterministic for a given `seed`.
pub fn sample_surface(
    dofs: &CArmDofs,
    geom: &CArmGeometry,
    density: f64,
    seed: u64,
) -> Result<TaggedPointCloud, KinematicsError> {
    let prims = surface_primitives(dofs, geom)?;
    let per_mm2 = density.max(0.0) * 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut local = Vec::new();
    for placed in &prims {
        local.clear();
        placed.primitive.sample(per_mm2, &mut rng, &mut local);
        points.extend(local.iter().map(|p| placed.pose.apply(p)));
    }
    Ok(TaggedPointCloud::new(FrameId::World, points, 0.0).expect("surface samples are finite"))
}

/// World-frame 3D keypoint (e.g. a radiopaque marker on the phantom).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint3D {
    pub id: String,
    pub position: Vec3,
}

/// Outcome of projecting a point onto the detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum XrayProjection {
    Pixel { u: f64, v: f64 },
    OutsideFieldOfView,
}

/// Central projection from the source onto the detector plane, in pixels.
/// The principal point is the detector center; detector u/v follow gantry
/// x/y.
pub fn xray_project(
    point: &Keypoint3D,
    dofs: &CArmDofs,
    geom: &CArmGeometry,
) -> Result<XrayProjection, KinematicsError> {
    let poses = forward_kinematics(dofs, geom)?;
    project_with_poses(&point.position, &poses, geom)
}

/// As [`xray_project`] with precomputed poses.
pub fn project_with_poses(
    position: &Vec3,
    poses: &CArmPoses,
    geom: &CArmGeometry,
) -> Result<XrayProjection, KinematicsError> {
    let local = poses.source.inverse().apply(position);
    if !(local.z > 0.0) {
        return Err(KinematicsError::BehindSource);
    }
    let scale = geom.source_to_detector / local.z;
    let (cu, cv) = geom.principal_point();
    let u = cu + local.x * scale / geom.pixel_pitch;
    let v = cv + local.y * scale / geom.pixel_pitch;
    let (w, h) = (geom.detector_pixels.0 as f64, geom.detector_pixels.1 as f64);
    if u < 0.0 || v < 0.0 || u > w || v > h {
        return Ok(XrayProjection::OutsideFieldOfView);
    }
    Ok(XrayProjection::Pixel { u, v })
}

/// Limits for a local adjustment hint.
pub const HINT_MAX_ANGLE_DEG: f64 = 15.0;
pub const HINT_MAX_DISTANCE_MM: f64 = 200.0;

/// Weight converting degrees of orientation error into mm-equivalents.
const TASK_MM_PER_DEG: f64 = 10.0;
/// Effort weight per degree of joint motion, relative to 1 mm of travel.
const JOINT_MM_PER_DEG: f64 = 50.0;
const HINT_DAMPING: f64 = 1e-3;
const HINT_MIN_CONDITION: f64 = 1e-4;

/// Task-space error `[Δp (mm); 10·rotvec (deg)]` taking `from` to `to`.
fn task_error(from: &RigidTransform, to: &RigidTransform) -> SVector<f64, 6> {
    let dp = to.translation() - from.translation();
    let rel = to.compose(&from.inverse());
    let w = rel.rotation_vector() * (TASK_MM_PER_DEG * 180.0 / core::f64::consts::PI);
    SVector::<f64, 6>::new(dp.x, dp.y, dp.z, w.x, w.y, w.z)
}

fn joint_scale(i: usize) -> f64 {
    if i < 3 {
        1.0
    } else {
        JOINT_MM_PER_DEG
    }
}

/// Central-difference Jacobian of the gantry pose, in scaled joint units.
fn scaled_jacobian(current: &CArmDofs, geom: &CArmGeometry) -> SMatrix<f64, 6, DOF_COUNT> {
    let base = poses_unchecked(current, geom).gantry;
    let q = current.to_array();
    let mut jac = SMatrix::<f64, 6, DOF_COUNT>::zeros();
    for i in 0..DOF_COUNT {
        let h = if i < 3 { 0.5 } else { 0.01 };
        let mut plus = q;
        let mut minus = q;
        plus[i] += h;
        minus[i] -= h;
        let gp = poses_unchecked(&CArmDofs::from_array(plus), geom).gantry;
        let gm = poses_unchecked(&CArmDofs::from_array(minus), geom).gantry;
        let col = (task_error(&base, &gp) - task_error(&base, &gm)) / (2.0 * h);
        // Columns per unit of scaled joint variable s = q·scale.
        jac.set_column(i, &(col / joint_scale(i)));
    }
    jac
}

/// Damped least-squares DOF increments that move the gantry by `delta`
/// (world frame, applied on the left of the current gantry pose).
///
/// Only meant for local guidance: deltas beyond 15° or 200 mm are rejected.
pub fn dof_adjustment_from_delta(
    delta: &RigidTransform,
    current: &CArmDofs,
    geom: &CArmGeometry,
) -> Result<CArmDofs, KinematicsError> {
    let (angle_deg, distance_mm) = delta.deviation_from_identity();
    if angle_deg > HINT_MAX_ANGLE_DEG || distance_mm > HINT_MAX_DISTANCE_MM {
        return Err(KinematicsError::HintOutOfRange {
            angle_deg,
            distance_mm,
        });
    }
    current.validate()?;
    geom.validate()?;
    if angle_deg == 0.0 && distance_mm == 0.0 {
        return Ok(CArmDofs::from_array([0.0; DOF_COUNT]));
    }
    let gantry = poses_unchecked(current, geom).gantry;
    let target = delta.compose(&gantry);
    let err = task_error(&gantry, &target);
    let jac = scaled_jacobian(current, geom);

    let svd = jac.svd(false, false);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    let ratio = if s_max > 0.0 { s_min / s_max } else { 0.0 };
    if ratio < HINT_MIN_CONDITION {
        return Err(KinematicsError::NoReliableHint { ratio });
    }

    let lambda = HINT_DAMPING * s_max;
    let jjt = jac * jac.transpose() + SMatrix::<f64, 6, 6>::identity() * (lambda * lambda);
    let y = jjt
        .cholesky()
        .ok_or(KinematicsError::NoReliableHint { ratio })?
        .solve(&err);
    let scaled = jac.transpose() * y;
    Ok(CArmDofs::from_array(core::array::from_fn(|i| {
        scaled[i] / joint_scale(i)
    })))
}
