//! Virtual infrared depth camera on the headset.
//!
//! Camera convention: z forward along the optical axis, x right, y down.
//! Pixel `(u, v)` is the ray through `((u − cx)/fx, (v − cy)/fy, 1)`; depth
//! is the z coordinate in the sensor frame, 0 meaning "no return".

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{FrameId, RigidTransform, TaggedPointCloud, Vec3};
use crate::surface::{cast_ray, PlacedPrimitive};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DepthError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("depth buffer has {found} values, expected {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("depth at pixel {index} is negative or non-finite")]
    InvalidDepth { index: usize },
    #[error("noise sigma must be finite and non-negative")]
    InvalidNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 360.0,
            fy: 360.0,
            cx: 160.0,
            cy: 144.0,
            width: 320,
            height: 288,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), DepthError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(DepthError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(DepthError::InvalidIntrinsics("cx outside the image"));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(DepthError::InvalidIntrinsics("cy outside the image"));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Pinhole projection of a sensor-frame point; `None` when `z ≤ 0`.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if !(p.z > 0.0) {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Ray direction through pixel `(u, v)` with unit z component.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// Row-major depth image in millimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthImage {
    intrinsics: CameraIntrinsics,
    depth: Vec<f64>,
    timestamp: f64,
}

impl DepthImage {
    pub fn new(intrinsics: CameraIntrinsics, depth: Vec<f64>, timestamp: f64) -> Result<Self, DepthError> {
        intrinsics.validate()?;
        if depth.len() != intrinsics.pixel_count() {
            return Err(DepthError::SizeMismatch {
                expected: intrinsics.pixel_count(),
                found: depth.len(),
            });
        }
        if let Some(index) = depth.iter().position(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(DepthError::InvalidDepth { index });
        }
        Ok(Self {
            intrinsics,
            depth,
            timestamp,
        })
    }

    pub fn zeros(intrinsics: CameraIntrinsics, timestamp: f64) -> Self {
        Self {
            depth: vec![0.0; intrinsics.pixel_count()],
            intrinsics,
            timestamp,
        }
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    pub fn at(&self, u: u32, v: u32) -> f64 {
        self.depth[v as usize * self.intrinsics.width as usize + u as usize]
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }
}

/// What the camera sees, in the world frame.
#[derive(Debug, Clone, Copy)]
pub enum Scene<'a> {
    /// Surface samples splatted into the z-buffer, one pixel each. Sample
    /// at ≥ 4 points per pixel footprint to avoid holes.
    Points(&'a [Vec3]),
    /// Analytic surfaces, ray-cast per pixel (exact depths).
    Primitives(&'a [PlacedPrimitive]),
}

/// Renders a depth image of `scene` seen from `world_from_sensor`.
///
/// Nearest depth wins per pixel. Gaussian noise of `noise_sigma` mm is
/// added to every returning pixel, drawn in row-major order from a stream
/// seeded by `seed`.
pub fn render_depth(
    scene: Scene<'_>,
    world_from_sensor: &RigidTransform,
    intrinsics: &CameraIntrinsics,
    noise_sigma: f64,
    seed: u64,
    timestamp: f64,
) -> Result<DepthImage, DepthError> {
    intrinsics.validate()?;
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(DepthError::InvalidNoise);
    }
    let width = intrinsics.width as usize;
    let mut depth = vec![0.0; intrinsics.pixel_count()];
    match scene {
        Scene::Points(points) => {
            let sensor_from_world = world_from_sensor.inverse();
            for p in points {
                let pc = sensor_from_world.apply(p);
                let Some((u, v)) = intrinsics.project(&pc) else {
                    continue;
                };
                let (u, v) = (libm::round(u), libm::round(v));
                if !intrinsics.contains(u, v) {
                    continue;
                }
                let slot = &mut depth[v as usize * width + u as usize];
                if *slot == 0.0 || pc.z < *slot {
                    *slot = pc.z;
                }
            }
        }
        Scene::Primitives(prims) => {
            let origin = *world_from_sensor.translation();
            for v in 0..intrinsics.height {
                for u in 0..intrinsics.width {
                    let dir = world_from_sensor.rotate(&intrinsics.ray(u as f64, v as f64));
                    if let Some(t) = cast_ray(prims, &origin, &dir) {
                        depth[v as usize * width + u as usize] = t;
                    }
                }
            }
        }
    }
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|_| DepthError::InvalidNoise)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for d in depth.iter_mut().filter(|d| **d > 0.0) {
            *d = (*d + normal.sample(&mut rng)).max(0.0);
        }
    }
    Ok(DepthImage {
        intrinsics: *intrinsics,
        depth,
        timestamp,
    })
}

/// Back-projects every returning pixel to a sensor-frame point:
/// `(u, v, d) → ((u − cx)·d/fx, (v − cy)·d/fy, d)`.
pub fn unproject_depth(img: &DepthImage) -> TaggedPointCloud {
    let k = &img.intrinsics;
    let width = k.width as usize;
    let points = img
        .depth
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 0.0)
        .map(|(i, &d)| {
            let u = (i % width) as f64;
            let v = (i / width) as f64;
            Vec3::new((u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d)
        })
        .collect();
    TaggedPointCloud::new(FrameId::IrSensor, points, img.timestamp).expect("finite depths")
}
