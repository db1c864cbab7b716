//! Point-to-point ICP between a live cloud and a saved view.
//!
//! Correspondences come from a balanced k-d tree over the saved cloud and
//! are gated by a fixed distance. Each iteration fits the closed-form rigid
//! transform (Kabsch) to the gated pairs. The tracked objective is the
//! truncated squared distance `Σ min(d², gate²) / N`, which the fit/search
//! alternation cannot increase.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::geometry::{FrameId, GeometryError, RigidTransform, TaggedPointCloud, Vec3};
use crate::kinematics::{dof_adjustment_from_delta, CArmDofs, CArmGeometry};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IcpError {
    #[error("nearest-neighbour query on an empty index")]
    EmptyIndex,
    #[error(transparent)]
    Frame(#[from] GeometryError),
    #[error("insufficient overlap: {found} correspondences at iteration {iteration}, need {required}")]
    InsufficientOverlap {
        found: usize,
        required: usize,
        iteration: usize,
    },
    #[error("invalid ICP parameter: {0}")]
    InvalidParams(&'static str),
}

const LEAF_SIZE: usize = 8;

/// Balanced k-d tree stored implicitly: every subrange `[lo, hi)` of `order`
/// has its splitting element at the midpoint.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<u32>,
    axis: Vec<u8>,
}

/// Result of a nearest-neighbour query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub point: Vec3,
    pub distance: f64,
}

impl KdTree {
    pub fn new(points: Vec<Vec3>) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut axis = alloc::vec![0u8; points.len()];
        build(&points, &mut order, &mut axis);
        Self { points, order, axis }
    }

    pub fn from_cloud(cloud: &TaggedPointCloud) -> Self {
        Self::new(cloud.points().to_vec())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Exact Euclidean nearest neighbour; ties go to the lowest index.
    pub fn nearest(&self, query: &Vec3) -> Result<Neighbor, IcpError> {
        if self.points.is_empty() {
            return Err(IcpError::EmptyIndex);
        }
        let mut best = (f64::INFINITY, usize::MAX);
        self.search(query, 0, self.order.len(), &mut best);
        Ok(Neighbor {
            index: best.1,
            point: self.points[best.1],
            distance: libm::sqrt(best.0),
        })
    }

    /// Nearest point no farther than `radius`, if any. Ties resolve as in
    /// [`Self::nearest`].
    pub fn nearest_within(&self, query: &Vec3, radius: f64) -> Result<Option<Neighbor>, IcpError> {
        if self.points.is_empty() {
            return Err(IcpError::EmptyIndex);
        }
        let mut best = (radius * radius, usize::MAX);
        self.search(query, 0, self.order.len(), &mut best);
        Ok((best.1 != usize::MAX).then(|| Neighbor {
            index: best.1,
            point: self.points[best.1],
            distance: libm::sqrt(best.0),
        }))
    }

    fn search(&self, q: &Vec3, lo: usize, hi: usize, best: &mut (f64, usize)) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                consider(best, (self.points[i as usize] - q).norm_squared(), i as usize);
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let i = self.order[mid] as usize;
        let a = self.axis[mid] as usize;
        consider(best, (self.points[i] - q).norm_squared(), i);
        let diff = q[a] - self.points[i][a];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, best);
        if diff * diff <= best.0 {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn consider(best: &mut (f64, usize), d2: f64, i: usize) {
    if d2 < best.0 || (d2 == best.0 && i < best.1) {
        *best = (d2, i);
    }
}

fn build(points: &[Vec3], order: &mut [u32], axis: &mut [u8]) {
    let n = order.len();
    if n <= LEAF_SIZE {
        return;
    }
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for &i in order.iter() {
        lo = lo.inf(&points[i as usize]);
        hi = hi.sup(&points[i as usize]);
    }
    let a = (hi - lo).imax();
    let mid = n / 2;
    order.select_nth_unstable_by(mid, |x, y| points[*x as usize][a].total_cmp(&points[*y as usize][a]));
    axis[mid] = a as u8;
    let (left, rest) = order.split_at_mut(mid);
    let (axis_left, axis_rest) = axis.split_at_mut(mid);
    build(points, left, axis_left);
    build(points, &mut rest[1..], &mut axis_rest[1..]);
}

/// Linear-scan nearest neighbour with the same tie rule as [`KdTree::nearest`].
pub fn nearest_linear(points: &[Vec3], query: &Vec3) -> Result<Neighbor, IcpError> {
    let mut best = (f64::INFINITY, usize::MAX);
    for (i, p) in points.iter().enumerate() {
        consider(&mut best, (p - query).norm_squared(), i);
    }
    if best.1 == usize::MAX {
        return Err(IcpError::EmptyIndex);
    }
    Ok(Neighbor {
        index: best.1,
        point: points[best.1],
        distance: libm::sqrt(best.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// mm
    pub rms_delta_threshold: f64,
    /// mm
    pub max_correspondence_distance: f64,
    pub min_correspondences: usize,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            rms_delta_threshold: 1e-4,
            max_correspondence_distance: 150.0,
            min_correspondences: 100,
        }
    }
}

impl IcpParams {
    pub fn validate(&self) -> Result<(), IcpError> {
        if self.max_iterations == 0 {
            return Err(IcpError::InvalidParams("max_iterations must be positive"));
        }
        if !(self.rms_delta_threshold > 0.0 && self.rms_delta_threshold.is_finite()) {
            return Err(IcpError::InvalidParams("rms_delta_threshold must be positive"));
        }
        if !(self.max_correspondence_distance > 0.0 && self.max_correspondence_distance.is_finite()) {
            return Err(IcpError::InvalidParams("max_correspondence_distance must be positive"));
        }
        if self.min_correspondences < 3 {
            return Err(IcpError::InvalidParams("min_correspondences must be at least 3"));
        }
        Ok(())
    }
}

/// C-arm DOF guidance attached to an alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DofHint {
    /// Increments to add to the current DOFs.
    Adjust { increments: CArmDofs },
    Unavailable { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Maps live points onto the saved view.
    pub delta: RigidTransform,
    /// Translation of `delta`, mm.
    pub distance_mm: f64,
    /// Rotation angle of `delta`, degrees.
    pub angle_deg: f64,
    /// Inlier RMS at the final pose, mm.
    pub rms: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Gated correspondences at the final pose.
    pub correspondences: usize,
    /// Truncated-objective RMS, one entry per accepted pose starting with identity.
    pub rms_history: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dof_hints: Option<DofHint>,
}

struct Matches {
    pairs: Vec<(Vec3, Vec3)>,
    truncated_sum: f64,
    inlier_sum: f64,
}

fn correspond(index: &KdTree, live: &[Vec3], pose: &RigidTransform, gate: f64) -> Result<Matches, IcpError> {
    let gate2 = gate * gate;
    let mut pairs = Vec::with_capacity(live.len());
    let mut truncated_sum = 0.0;
    let mut inlier_sum = 0.0;
    for p in live {
        let moved = pose.apply(p);
        match index.nearest_within(&moved, gate)? {
            Some(nn) if nn.distance <= gate => {
                let d2 = nn.distance * nn.distance;
                pairs.push((*p, nn.point));
                truncated_sum += d2;
                inlier_sum += d2;
            }
            _ => truncated_sum += gate2,
        }
    }
    Ok(Matches {
        pairs,
        truncated_sum,
        inlier_sum,
    })
}

/// Least-squares rigid transform taking the first element of each pair onto
/// the second (SVD of the cross-covariance, reflection corrected).
pub fn kabsch(pairs: &[(Vec3, Vec3)]) -> RigidTransform {
    if pairs.is_empty() {
        return RigidTransform::identity();
    }
    let n = pairs.len() as f64;
    let (sp, sq) = pairs
        .iter()
        .fold((Vec3::zeros(), Vec3::zeros()), |(a, b), (p, q)| (a + p, b + q));
    let cp = sp / n;
    let cq = sq / n;
    let h: Matrix3<f64> = pairs
        .iter()
        .fold(Matrix3::zeros(), |h, (p, q)| h + (p - cp) * (q - cq).transpose());
    let svd = h.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return RigidTransform::from_translation(cq.x - cp.x, cq.y - cp.y, cq.z - cp.z);
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let fix = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, if d < 0.0 { -1.0 } else { 1.0 }));
    let r = v * fix * u.transpose();
    let rotation = nalgebra::UnitQuaternion::from_matrix(&r);
    let t = cq - rotation * cp;
    RigidTransform::new(rotation, t)
}

/// Aligns `live` onto `saved`, starting from identity.
pub fn icp_align(live: &TaggedPointCloud, saved: &TaggedPointCloud, params: &IcpParams) -> Result<AlignmentReport, IcpError> {
    params.validate()?;
    saved.ensure_frame(live.frame())?;
    live.ensure_non_empty()?;
    saved.ensure_non_empty()?;
    let index = KdTree::from_cloud(saved);
    icp_align_indexed(live.points(), &index, params)
}

/// As [`icp_align`], reusing a prebuilt index over the saved cloud.
pub fn icp_align_indexed(live: &[Vec3], index: &KdTree, params: &IcpParams) -> Result<AlignmentReport, IcpError> {
    params.validate()?;
    let n = live.len() as f64;
    let gate = params.max_correspondence_distance;
    let check = |m: &Matches, iteration: usize| {
        if m.pairs.len() < params.min_correspondences {
            Err(IcpError::InsufficientOverlap {
                found: m.pairs.len(),
                required: params.min_correspondences,
                iteration,
            })
        } else {
            Ok(())
        }
    };

    let mut pose = RigidTransform::identity();
    let mut matches = correspond(index, live, &pose, gate)?;
    check(&matches, 0)?;
    let mut rms = libm::sqrt(matches.truncated_sum / n);
    let mut history = alloc::vec![rms];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < params.max_iterations {
        iterations += 1;
        let candidate = kabsch(&matches.pairs);
        let next = correspond(index, live, &candidate, gate)?;
        check(&next, iterations)?;
        let next_rms = libm::sqrt(next.truncated_sum / n);
        if next_rms > rms {
            // Roundoff at the optimum; keep the previous pose.
            converged = true;
            break;
        }
        pose = candidate;
        matches = next;
        let change = rms - next_rms;
        rms = next_rms;
        history.push(rms);
        if change < params.rms_delta_threshold {
            converged = true;
            break;
        }
    }

    let (angle_deg, distance_mm) = pose.deviation_from_identity();
    Ok(AlignmentReport {
        delta: pose,
        distance_mm,
        angle_deg,
        rms: libm::sqrt(matches.inlier_sum / matches.pairs.len() as f64),
        iterations,
        converged,
        correspondences: matches.pairs.len(),
        rms_history: history,
        dof_hints: None,
    })
}

/// [`icp_align`] plus DOF increments that would move the C-arm by the
/// recovered delta from `current`.
pub fn align_with_hints(
    live: &TaggedPointCloud,
    saved: &TaggedPointCloud,
    params: &IcpParams,
    current: &CArmDofs,
    geom: &CArmGeometry,
) -> Result<AlignmentReport, IcpError> {
    live.ensure_frame(FrameId::World)?;
    let mut report = icp_align(live, saved, params)?;
    report.dof_hints = Some(match dof_adjustment_from_delta(&report.delta, current, geom) {
        Ok(increments) => DofHint::Adjust { increments },
        Err(e) => DofHint::Unavailable { reason: e.to_string() },
    });
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Green,
    Amber,
    Red,
}

/// Display thresholds for alignment feedback. Not clinical limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentBands {
    pub green_mm: f64,
    pub green_deg: f64,
    pub amber_mm: f64,
    pub amber_deg: f64,
}

impl Default for AlignmentBands {
    fn default() -> Self {
        Self {
            green_mm: 5.0,
            green_deg: 1.0,
            amber_mm: 20.0,
            amber_deg: 3.0,
        }
    }
}

impl AlignmentBands {
    pub fn classify(&self, distance_mm: f64, angle_deg: f64) -> Band {
        if distance_mm <= self.green_mm && angle_deg <= self.green_deg {
            Band::Green
        } else if distance_mm <= self.amber_mm && angle_deg <= self.amber_deg {
            Band::Amber
        } else {
            Band::Red
        }
    }

    pub fn classify_report(&self, report: &AlignmentReport) -> Band {
        self.classify(report.distance_mm, report.angle_deg)
    }
}
