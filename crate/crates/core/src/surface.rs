//! Analytic surface primitives: closed-form area, stratified sampling,
//! point-to-surface distance and ray intersection.

use alloc::vec::Vec;
use core::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{RigidTransform, Vec3};

/// Surface shapes in their local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Sector of a torus around the local z axis. The tube centerline is the
    /// circle of radius `major` in the xy plane, covering polar angles
    /// `start_deg .. start_deg + span_deg`. The tube ends are open.
    TorusSector {
        major: f64,
        minor: f64,
        start_deg: f64,
        span_deg: f64,
    },
    /// Lateral surface of a cylinder around the local z axis, `z0 ≤ z ≤ z1`.
    Cylinder { radius: f64, z0: f64, z1: f64 },
    /// Closed axis-aligned box centered at the local origin.
    Box { half_extents: [f64; 3] },
}

const HIT_EPS: f64 = 1e-9;
const MARCH_TOL: f64 = 1e-11;
const MARCH_MAX_STEPS: usize = 600;

impl Primitive {
    /// Surface area, mm².
    pub fn area(&self) -> f64 {
        match *self {
            // Pappus: tube circumference times centerline arc length.
            Primitive::TorusSector {
                major,
                minor,
                span_deg,
                ..
            } => TAU * minor * major * span_deg.to_radians(),
            Primitive::Cylinder { radius, z0, z1 } => TAU * radius * (z1 - z0).max(0.0),
            Primitive::Box { half_extents: h } => {
                8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2])
            }
        }
    }

    /// Number of samples this primitive receives at `density` points per mm².
    pub fn sample_count(&self, density_per_mm2: f64) -> usize {
        match *self {
            Primitive::Box { half_extents } => box_faces(half_extents)
                .iter()
                .map(|f| libm::round(density_per_mm2 * f.area()) as usize)
                .sum(),
            _ => libm::round(density_per_mm2 * self.area()) as usize,
        }
    }

    /// Stratified random samples in the local frame, appended to `out`.
    pub fn sample<R: Rng>(&self, density_per_mm2: f64, rng: &mut R, out: &mut Vec<Vec3>) {
        match *self {
            Primitive::TorusSector {
                major,
                minor,
                start_deg,
                span_deg,
            } => {
                let n = self.sample_count(density_per_mm2);
                let start = start_deg.to_radians();
                let span = span_deg.to_radians();
                let k = minor / major;
                for i in 0..n {
                    let theta = start + span * (i as f64 + rng.random::<f64>()) / n as f64;
                    let phi = torus_tube_angle(k, rng.random::<f64>());
                    let rho = major + minor * libm::cos(phi);
                    out.push(Vec3::new(
                        rho * libm::cos(theta),
                        rho * libm::sin(theta),
                        minor * libm::sin(phi),
                    ));
                }
            }
            Primitive::Cylinder { radius, z0, z1 } => {
                let n = self.sample_count(density_per_mm2);
                for i in 0..n {
                    let z = z0 + (z1 - z0) * (i as f64 + rng.random::<f64>()) / n as f64;
                    let a = TAU * rng.random::<f64>();
                    out.push(Vec3::new(radius * libm::cos(a), radius * libm::sin(a), z));
                }
            }
            Primitive::Box { half_extents } => {
                for face in box_faces(half_extents) {
                    let n = libm::round(density_per_mm2 * face.area()) as usize;
                    for i in 0..n {
                        let s = (i as f64 + rng.random::<f64>()) / n as f64;
                        let t = rng.random::<f64>();
                        out.push(face.point(s, t));
                    }
                }
            }
        }
    }

    /// Unsigned distance from a local-frame point to the surface.
    pub fn distance(&self, p: &Vec3) -> f64 {
        match *self {
            Primitive::TorusSector {
                major,
                minor,
                start_deg,
                span_deg,
            } => {
                let theta = libm::atan2(p.y, p.x);
                if angle_in_sector(theta, start_deg, span_deg) {
                    libm::fabs(torus_sdf(major, minor, p))
                } else {
                    let a = start_deg.to_radians();
                    let b = (start_deg + span_deg).to_radians();
                    end_circle_distance(major, minor, a, p)
                        .min(end_circle_distance(major, minor, b, p))
                }
            }
            Primitive::Cylinder { radius, z0, z1 } => {
                let rho = libm::hypot(p.x, p.y);
                let dz = if p.z < z0 {
                    z0 - p.z
                } else if p.z > z1 {
                    p.z - z1
                } else {
                    0.0
                };
                libm::hypot(rho - radius, dz)
            }
            Primitive::Box { half_extents: h } => {
                let q = Vec3::new(
                    libm::fabs(p.x) - h[0],
                    libm::fabs(p.y) - h[1],
                    libm::fabs(p.z) - h[2],
                );
                let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                libm::fabs(outside + inside)
            }
        }
    }

    /// Smallest ray parameter `t > 0` where `origin + t·dir` meets the
    /// surface. `dir` need not be unit length.
    pub fn intersect_ray(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        match *self {
            Primitive::Box { half_extents } => ray_box(origin, dir, half_extents),
            Primitive::Cylinder { radius, z0, z1 } => ray_cylinder(origin, dir, radius, z0, z1),
            Primitive::TorusSector {
                major,
                minor,
                start_deg,
                span_deg,
            } => ray_torus_sector(origin, dir, major, minor, start_deg, span_deg),
        }
    }
}

/// A primitive placed in a parent frame by `pose` (parent_from_local).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedPrimitive {
    pub pose: RigidTransform,
    pub primitive: Primitive,
}

impl PlacedPrimitive {
    pub fn distance(&self, p: &Vec3) -> f64 {
        let local = self.pose.inverse().apply(p);
        self.primitive.distance(&local)
    }

    pub fn intersect_ray(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let inv = self.pose.inverse();
        self.primitive
            .intersect_ray(&inv.apply(origin), &inv.rotate(dir))
    }

    pub fn placed(&self, parent: &RigidTransform) -> PlacedPrimitive {
        PlacedPrimitive {
            pose: parent.compose(&self.pose),
            primitive: self.primitive,
        }
    }
}

/// Distance from `p` to the nearest of `prims`.
pub fn distance_to_surfaces(prims: &[PlacedPrimitive], p: &Vec3) -> f64 {
    prims
        .iter()
        .map(|s| s.distance(p))
        .fold(f64::INFINITY, f64::min)
}

/// Nearest hit among `prims`.
pub fn cast_ray(prims: &[PlacedPrimitive], origin: &Vec3, dir: &Vec3) -> Option<f64> {
    prims
        .iter()
        .filter_map(|s| s.intersect_ray(origin, dir))
        .fold(None, |best: Option<f64>, t| Some(best.map_or(t, |b| b.min(t))))
}

fn angle_in_sector(theta: f64, start_deg: f64, span_deg: f64) -> bool {
    if span_deg >= 360.0 {
        return true;
    }
    let rel = (theta - start_deg.to_radians()).rem_euclid(TAU);
    rel <= span_deg.to_radians()
}

fn torus_sdf(major: f64, minor: f64, p: &Vec3) -> f64 {
    libm::hypot(libm::hypot(p.x, p.y) - major, p.z) - minor
}

fn end_circle_distance(major: f64, minor: f64, angle: f64, p: &Vec3) -> f64 {
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    let center = Vec3::new(major * c, major * s, 0.0);
    let normal = Vec3::new(-s, c, 0.0);
    let d = p - center;
    let h = d.dot(&normal);
    let in_plane = (d - normal * h).norm();
    libm::hypot(h, in_plane - minor)
}

/// Inverts the tube-angle CDF `(φ + k·sin φ) / 2π` by Newton iteration.
fn torus_tube_angle(k: f64, u: f64) -> f64 {
    let target = TAU * u;
    let mut phi = target;
    for _ in 0..50 {
        let f = phi + k * libm::sin(phi) - target;
        let df = 1.0 + k * libm::cos(phi);
        let step = f / df;
        phi -= step;
        if libm::fabs(step) < 1e-14 {
            break;
        }
    }
    phi
}

#[derive(Clone, Copy)]
struct BoxFace {
    center: Vec3,
    u: Vec3,
    v: Vec3,
}

impl BoxFace {
    fn area(&self) -> f64 {
        4.0 * self.u.norm() * self.v.norm()
    }

    fn point(&self, s: f64, t: f64) -> Vec3 {
        self.center + self.u * (2.0 * s - 1.0) + self.v * (2.0 * t - 1.0)
    }
}

fn box_faces(h: [f64; 3]) -> [BoxFace; 6] {
    let (x, y, z) = (Vec3::x() * h[0], Vec3::y() * h[1], Vec3::z() * h[2]);
    [
        BoxFace { center: x, u: y, v: z },
        BoxFace { center: -x, u: y, v: z },
        BoxFace { center: y, u: x, v: z },
        BoxFace { center: -y, u: x, v: z },
        BoxFace { center: z, u: x, v: y },
        BoxFace { center: -z, u: x, v: y },
    ]
}

fn ray_box(o: &Vec3, d: &Vec3, h: [f64; 3]) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        if d[axis] == 0.0 {
            if libm::fabs(o[axis]) > h[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[axis];
        let mut t0 = (-h[axis] - o[axis]) * inv;
        let mut t1 = (h[axis] - o[axis]) * inv;
        if t0 > t1 {
            core::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
    }
    if t_near > t_far {
        return None;
    }
    if t_near > HIT_EPS {
        Some(t_near)
    } else if t_far > HIT_EPS {
        Some(t_far)
    } else {
        None
    }
}

fn ray_cylinder(o: &Vec3, d: &Vec3, r: f64, z0: f64, z1: f64) -> Option<f64> {
    let a = d.x * d.x + d.y * d.y;
    if a == 0.0 {
        return None;
    }
    let b = 2.0 * (o.x * d.x + o.y * d.y);
    let c = o.x * o.x + o.y * o.y - r * r;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = libm::sqrt(disc);
    // Numerically stable root pair.
    let q = if b >= 0.0 { -0.5 * (b + sq) } else { -0.5 * (b - sq) };
    let mut roots = [q / a, if q != 0.0 { c / q } else { q / a }];
    if roots[0] > roots[1] {
        roots.swap(0, 1);
    }
    roots.into_iter().find(|&t| {
        let z = o.z + t * d.z;
        t > HIT_EPS && z >= z0 && z <= z1
    })
}

fn ray_torus_sector(
    o: &Vec3,
    d: &Vec3,
    major: f64,
    minor: f64,
    start_deg: f64,
    span_deg: f64,
) -> Option<f64> {
    let len = d.norm();
    if len == 0.0 {
        return None;
    }
    let dir = d / len;
    // Clip the march to the bounding sphere.
    let bound = major + minor;
    let b = o.dot(&dir);
    let c = o.norm_squared() - bound * bound;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = libm::sqrt(disc);
    let t_exit = -b + sq;
    if t_exit <= 0.0 {
        return None;
    }
    let mut t = (-b - sq).max(0.0);
    let mut steps = 0;
    while t <= t_exit && steps < MARCH_MAX_STEPS {
        steps += 1;
        let p = o + dir * t;
        let f = torus_sdf(major, minor, &p);
        if libm::fabs(f) < 1e-7 {
            let t_hit = refine_torus_hit(o, &dir, major, minor, t);
            let hit = o + dir * t_hit;
            if t_hit > HIT_EPS && angle_in_sector(libm::atan2(hit.y, hit.x), start_deg, span_deg) {
                return Some(t_hit / len);
            }
            // Hit the full torus outside the sector; step through and continue.
            t = t_hit + 1e-3;
            continue;
        }
        t += libm::fabs(f);
    }
    None
}

fn refine_torus_hit(o: &Vec3, dir: &Vec3, major: f64, minor: f64, mut t: f64) -> f64 {
    for _ in 0..8 {
        let p = o + dir * t;
        let rho = libm::hypot(p.x, p.y);
        let f = torus_sdf(major, minor, &p);
        if libm::fabs(f) < MARCH_TOL {
            break;
        }
        let g_len = libm::hypot(rho - major, p.z);
        if rho == 0.0 || g_len == 0.0 {
            break;
        }
        let grad = Vec3::new(
            (rho - major) / g_len * p.x / rho,
            (rho - major) / g_len * p.y / rho,
            p.z / g_len,
        );
        let slope = grad.dot(dir);
        if libm::fabs(slope) < 1e-6 {
            break;
        }
        t -= f / slope;
    }
    t
}
