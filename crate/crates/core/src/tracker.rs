//! Headset self-localization against known world landmarks.
//!
//! The estimated pose is `world_from_technician` (the headset's tracking
//! camera). It is found by Levenberg–Marquardt minimization of the summed
//! squared pixel distance between observed features and the pinhole
//! projections of their landmarks.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::depth::{CameraIntrinsics, DepthError};
use crate::geometry::{RigidTransform, Vec3};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrackerError {
    #[error("landmark is not in front of the camera (depth {depth:.3} mm)")]
    BehindCamera { depth: f64 },
    #[error("underdetermined: {found} correspondences, need at least 4")]
    Underdetermined { found: usize },
    #[error("observation references unknown landmark {0:?}")]
    UnknownLandmark(String),
    #[error("duplicate landmark id {0:?}")]
    DuplicateLandmark(String),
    #[error("observation of {0:?} lies outside the sensor")]
    ObservationOutOfBounds(String),
    #[error(transparent)]
    Intrinsics(#[from] DepthError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: String,
    /// World position, mm.
    pub position: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureObservation {
    pub landmark_id: String,
    pub u: f64,
    pub v: f64,
    #[serde(default)]
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerEstimate {
    /// `world_from_technician`.
    pub pose: RigidTransform,
    /// Root-mean-square pixel distance over all correspondences.
    pub rms: f64,
    pub iterations: usize,
    pub converged: bool,
    /// RMS after the initial guess and after every accepted step.
    pub rms_history: Vec<f64>,
    /// Damping at termination.
    pub final_lambda: f64,
}

/// Termination and damping settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    /// Absolute change in RMS (px) below which an accepted step ends the solve.
    pub residual_tolerance: f64,
    pub initial_lambda: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            step_tolerance: 1e-10,
            residual_tolerance: 1e-8,
            initial_lambda: 1e-3,
        }
    }
}

/// Pinhole projection of `landmark` seen from `world_from_technician`.
pub fn project_feature(
    world_from_technician: &RigidTransform,
    landmark: &Landmark,
    intrinsics: &CameraIntrinsics,
) -> Result<(f64, f64), TrackerError> {
    let pc = world_from_technician.inverse().apply(&landmark.position);
    intrinsics
        .project(&pc)
        .ok_or(TrackerError::BehindCamera { depth: pc.z })
}

/// Matched landmark/observation pairs for one solve.
#[derive(Debug, Clone)]
pub struct ReprojectionProblem {
    points: Vec<Vec3>,
    pixels: Vec<[f64; 2]>,
    intrinsics: CameraIntrinsics,
}

impl ReprojectionProblem {
    pub fn new(
        landmarks: &[Landmark],
        observations: &[FeatureObservation],
        intrinsics: &CameraIntrinsics,
    ) -> Result<Self, TrackerError> {
        intrinsics.validate()?;
        let mut by_id = BTreeMap::new();
        for lm in landmarks {
            if by_id.insert(lm.id.as_str(), lm.position).is_some() {
                return Err(TrackerError::DuplicateLandmark(lm.id.clone()));
            }
        }
        let (w, h) = (intrinsics.width as f64, intrinsics.height as f64);
        let mut points = Vec::with_capacity(observations.len());
        let mut pixels = Vec::with_capacity(observations.len());
        for obs in observations {
            let position = by_id
                .get(obs.landmark_id.as_str())
                .ok_or_else(|| TrackerError::UnknownLandmark(obs.landmark_id.clone()))?;
            if !(obs.u >= 0.0 && obs.v >= 0.0 && obs.u <= w && obs.v <= h) {
                return Err(TrackerError::ObservationOutOfBounds(obs.landmark_id.clone()));
            }
            points.push(*position);
            pixels.push([obs.u, obs.v]);
        }
        if points.len() < 4 {
            return Err(TrackerError::Underdetermined { found: points.len() });
        }
        Ok(Self {
            points,
            pixels,
            intrinsics: *intrinsics,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Stacked `(u − u_obs, v − v_obs)` residuals for the camera extrinsic
    /// `technician_from_world`; `None` if any landmark is behind the camera.
    pub fn residuals(&self, technician_from_world: &RigidTransform) -> Option<DVector<f64>> {
        let mut r = DVector::zeros(2 * self.points.len());
        for (i, (x, obs)) in self.points.iter().zip(&self.pixels).enumerate() {
            let pc = technician_from_world.apply(x);
            let (u, v) = self.intrinsics.project(&pc)?;
            r[2 * i] = u - obs[0];
            r[2 * i + 1] = v - obs[1];
        }
        Some(r)
    }

    /// Analytic Jacobian of [`Self::residuals`] with respect to a left
    /// perturbation `δ = (ω, t)`: `T ← (R(ω), t) ∘ T`.
    pub fn jacobian(&self, technician_from_world: &RigidTransform) -> Option<DMatrix<f64>> {
        let k = &self.intrinsics;
        let mut jac = DMatrix::zeros(2 * self.points.len(), 6);
        for (i, x) in self.points.iter().enumerate() {
            let p = technician_from_world.apply(x);
            if !(p.z > 0.0) {
                return None;
            }
            let iz = 1.0 / p.z;
            let d_proj = Matrix2x3::new(
                k.fx * iz,
                0.0,
                -k.fx * p.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * p.y * iz * iz,
            );
            let d_rot = d_proj * (-skew(&p));
            jac.view_mut((2 * i, 0), (2, 3)).copy_from(&d_rot);
            jac.view_mut((2 * i, 3), (2, 3)).copy_from(&d_proj);
        }
        Some(jac)
    }

    fn rms(&self, r: &DVector<f64>) -> f64 {
        libm::sqrt(r.norm_squared() / self.points.len() as f64)
    }
}

/// Applies the left perturbation used by [`ReprojectionProblem::jacobian`].
pub fn perturb(t: &RigidTransform, delta: &SVector<f64, 6>) -> RigidTransform {
    let step = RigidTransform::from_rotation_vector(
        Vec3::new(delta[0], delta[1], delta[2]),
        Vec3::new(delta[3], delta[4], delta[5]),
    );
    step.compose(t)
}

fn skew(p: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -p.z, p.y, p.z, 0.0, -p.x, -p.y, p.x, 0.0)
}

/// Levenberg–Marquardt pose estimate from landmark correspondences.
pub fn solve_pose(
    landmarks: &[Landmark],
    observations: &[FeatureObservation],
    intrinsics: &CameraIntrinsics,
    initial_guess: &RigidTransform,
) -> Result<TrackerEstimate, TrackerError> {
    solve_pose_with(landmarks, observations, intrinsics, initial_guess, &SolverParams::default())
}

pub fn solve_pose_with(
    landmarks: &[Landmark],
    observations: &[FeatureObservation],
    intrinsics: &CameraIntrinsics,
    initial_guess: &RigidTransform,
    params: &SolverParams,
) -> Result<TrackerEstimate, TrackerError> {
    let problem = ReprojectionProblem::new(landmarks, observations, intrinsics)?;
    let mut extrinsic = initial_guess.inverse();
    let mut residuals = match problem.residuals(&extrinsic) {
        Some(r) => r,
        None => {
            let depth = landmarks
                .iter()
                .map(|l| extrinsic.apply(&l.position).z)
                .fold(f64::INFINITY, f64::min);
            return Err(TrackerError::BehindCamera { depth });
        }
    };
    let mut rms = problem.rms(&residuals);
    let mut history = alloc::vec![rms];
    let mut lambda = params.initial_lambda;
    let mut iterations = 0;
    let mut converged = rms == 0.0;

    while !converged && iterations < params.max_iterations {
        iterations += 1;
        let jac = problem
            .jacobian(&extrinsic)
            .expect("residuals were finite, so every landmark is in front");
        let jt = jac.transpose();
        let hessian: SMatrix<f64, 6, 6> = (&jt * &jac).fixed_view::<6, 6>(0, 0).into_owned();
        let gradient: SVector<f64, 6> = (&jt * &residuals).fixed_rows::<6>(0).into_owned();

        let mut damped = hessian;
        for i in 0..6 {
            damped[(i, i)] += lambda * hessian[(i, i)].max(1e-12);
        }
        let Some(chol) = damped.cholesky() else {
            lambda *= 10.0;
            continue;
        };
        let step = -chol.solve(&gradient);
        if step.norm() < params.step_tolerance {
            converged = true;
            break;
        }
        let candidate = perturb(&extrinsic, &step);
        match problem.residuals(&candidate) {
            Some(r) if problem.rms(&r) < rms => {
                let new_rms = problem.rms(&r);
                let change = rms - new_rms;
                extrinsic = candidate;
                residuals = r;
                rms = new_rms;
                history.push(rms);
                lambda *= 0.1;
                if change < params.residual_tolerance {
                    converged = true;
                }
            }
            _ => {
                lambda *= 10.0;
                if lambda > 1e20 {
                    break;
                }
            }
        }
    }

    Ok(TrackerEstimate {
        pose: extrinsic.inverse(),
        rms,
        iterations,
        converged,
        rms_history: history,
        final_lambda: lambda,
    })
}

/// Noise-free observations of every landmark visible from `world_from_technician`.
pub fn synthesize_observations(
    landmarks: &[Landmark],
    world_from_technician: &RigidTransform,
    intrinsics: &CameraIntrinsics,
    timestamp: f64,
) -> Vec<FeatureObservation> {
    landmarks
        .iter()
        .filter_map(|lm| {
            let (u, v) = project_feature(world_from_technician, lm, intrinsics).ok()?;
            let inside = u >= 0.0 && v >= 0.0 && u <= intrinsics.width as f64 && v <= intrinsics.height as f64;
            inside.then(|| FeatureObservation {
                landmark_id: lm.id.clone(),
                u,
                v,
                timestamp,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_delta;
    use alloc::format;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn landmarks_ahead(rng: &mut ChaCha8Rng, n: usize) -> Vec<Landmark> {
        (0..n)
            .map(|i| Landmark {
                id: format!("L{i}"),
                position: Vec3::new(
                    rng.random_range(-600.0..600.0),
                    rng.random_range(-500.0..500.0),
                    rng.random_range(1500.0..3500.0),
                ),
            })
            .collect()
    }

    #[test]
    fn projects_on_axis_and_offset() {
        let k = CameraIntrinsics::default();
        let axis = Landmark { id: "a".into(), position: Vec3::new(0.0, 0.0, 1000.0) };
        assert_eq!(project_feature(&RigidTransform::identity(), &axis, &k).unwrap(), (160.0, 144.0));
        let off = Landmark { id: "b".into(), position: Vec3::new(100.0, 0.0, 1000.0) };
        let (u, v) = project_feature(&RigidTransform::identity(), &off, &k).unwrap();
        assert!((u - 196.0).abs() < 1e-12 && v == 144.0);
        let behind = Landmark { id: "c".into(), position: Vec3::new(0.0, 0.0, -10.0) };
        assert!(matches!(
            project_feature(&RigidTransform::identity(), &behind, &k),
            Err(TrackerError::BehindCamera { .. })
        ));
    }

    #[test]
    fn already_optimal_guess() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = CameraIntrinsics::default();
        let lms = landmarks_ahead(&mut rng, 12);
        let truth = RigidTransform::from_axis_angle_deg(Vec3::new(0.1, 1.0, 0.2), 3.0)
            .with_translation(Vec3::new(20.0, -10.0, 5.0));
        let obs = synthesize_observations(&lms, &truth, &k, 0.0);
        let est = solve_pose(&lms, &obs, &k, &truth).unwrap();
        assert!(est.iterations <= 1);
        assert!(est.rms < 1e-9);
        let d = pose_delta(&est.pose, &truth);
        assert!(d.distance < 1e-9 && d.angle < 1e-9);
    }

    #[test]
    fn three_landmarks_underdetermined() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = CameraIntrinsics::default();
        let lms = landmarks_ahead(&mut rng, 3);
        let obs = synthesize_observations(&lms, &RigidTransform::identity(), &k, 0.0);
        assert_eq!(
            solve_pose(&lms, &obs, &k, &RigidTransform::identity()).unwrap_err(),
            TrackerError::Underdetermined { found: 3 }
        );
    }

    #[test]
    fn unknown_landmark_rejected() {
        let k = CameraIntrinsics::default();
        let obs = [FeatureObservation { landmark_id: "ghost".into(), u: 1.0, v: 1.0, timestamp: 0.0 }];
        assert!(matches!(
            solve_pose(&[], &obs, &k, &RigidTransform::identity()),
            Err(TrackerError::UnknownLandmark(_))
        ));
    }

    #[test]
    fn recovers_from_perturbed_guess() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = CameraIntrinsics::default();
        let lms = landmarks_ahead(&mut rng, 20);
        let truth = RigidTransform::from_axis_angle_deg(Vec3::new(0.4, -0.2, 1.0), 4.0)
            .with_translation(Vec3::new(-30.0, 15.0, 40.0));
        let obs = synthesize_observations(&lms, &truth, &k, 0.0);
        let guess = RigidTransform::from_axis_angle_deg(Vec3::new(1.0, 1.0, 0.0), 10.0)
            .with_translation(Vec3::new(60.0, 0.0, 80.0))
            .compose(&truth);
        let est = solve_pose(&lms, &obs, &k, &guess).unwrap();
        assert!(est.converged);
        let d = pose_delta(&est.pose, &truth);
        assert!(d.distance < 1e-4 && d.angle < 1e-5, "{d:?}");
        for w in est.rms_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }
}
