//! Repositioning study metrics: pose-difference statistics, projection
//! domain keypoint displacement and X-ray bookkeeping per run and arm.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{pose_delta, PoseDelta, RigidTransform};
use crate::kinematics::CArmDofs;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvaluationError {
    #[error("no pose pairs to evaluate")]
    Empty,
    #[error("keypoint sets share no ids")]
    NoSharedKeypoints,
    #[error("scenario {run}/{arm} has no target views")]
    NoViews { run: String, arm: MethodArm },
    #[error("view {view:?} has no preset")]
    UnknownPreset { view: String },
    #[error("log references view {view:?}, which run {run} does not define")]
    UndefinedView { run: String, view: String },
    #[error("view {view:?} in run {run} has no {what} record")]
    MissingRecord {
        run: String,
        view: String,
        what: &'static str,
    },
    #[error("log event {index} is earlier than its predecessor")]
    OutOfOrder { index: usize },
}

/// Map keypoint id → detector pixel `[u, v]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeypointSet(pub BTreeMap<String, [f64; 2]>);

impl KeypointSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, u: f64, v: f64) {
        self.0.insert(id.into(), [u, v]);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<[f64; 2]> {
        self.0.get(id).copied()
    }

    pub fn shifted(&self, du: f64, dv: f64) -> KeypointSet {
        KeypointSet(
            self.0
                .iter()
                .map(|(k, p)| (k.clone(), [p[0] + du, p[1] + dv]))
                .collect(),
        )
    }
}

/// Mean Euclidean pixel distance over the ids both sets contain.
pub fn keypoint_displacement(a: &KeypointSet, b: &KeypointSet) -> Result<f64, EvaluationError> {
    let mut acc = Welford::default();
    for (id, pa) in &a.0 {
        if let Some(pb) = b.0.get(id) {
            let du = pa[0] - pb[0];
            let dv = pa[1] - pb[1];
            acc.push(libm::sqrt(du * du + dv * dv));
        }
    }
    if acc.count == 0 {
        return Err(EvaluationError::NoSharedKeypoints);
    }
    Ok(acc.mean)
}

/// Mean ± sample standard deviation (n − 1) of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

/// Welford accumulator; identical inputs give an exactly zero spread.
#[derive(Debug, Default, Clone, Copy)]
struct Welford {
    count: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn finish(&self) -> MeanSd {
        let sd = if self.count > 1 {
            libm::sqrt((self.m2 / (self.count - 1) as f64).max(0.0))
        } else {
            0.0
        };
        MeanSd {
            mean: self.mean,
            sd,
            count: self.count,
        }
    }
}

pub fn mean_sd(values: impl IntoIterator<Item = f64>) -> Option<MeanSd> {
    let mut acc = Welford::default();
    values.into_iter().for_each(|v| acc.push(v));
    (acc.count > 0).then(|| acc.finish())
}

/// Translational and angular error statistics over a set of poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorStats {
    /// mm
    pub distance: MeanSd,
    /// degrees
    pub angle: MeanSd,
}

/// Per-pair [`pose_delta`] of `(final, target)`, then mean and sample SD.
pub fn pose_error_stats(pairs: &[(RigidTransform, RigidTransform)]) -> Result<PoseErrorStats, EvaluationError> {
    let deltas: Vec<PoseDelta> = pairs.iter().map(|(f, t)| pose_delta(f, t)).collect();
    stats_from_deltas(&deltas)
}

fn stats_from_deltas(deltas: &[PoseDelta]) -> Result<PoseErrorStats, EvaluationError> {
    let distance = mean_sd(deltas.iter().map(|d| d.distance)).ok_or(EvaluationError::Empty)?;
    let angle = mean_sd(deltas.iter().map(|d| d.angle)).ok_or(EvaluationError::Empty)?;
    Ok(PoseErrorStats { distance, angle })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArm {
    /// Repositioning from memory, refined with X-ray images.
    Conventional,
    /// Repositioning against the stored point cloud.
    Proposed,
}

impl core::fmt::Display for MethodArm {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            MethodArm::Conventional => "conventional",
            MethodArm::Proposed => "proposed",
        })
    }
}

/// One run of the study for one method arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyScenario {
    pub run: String,
    pub arm: MethodArm,
    /// Target view labels, in the order they are restored.
    pub views: Vec<String>,
    /// DOF presets per view label; labels missing here fall back to the
    /// built-in presets.
    #[serde(default)]
    pub presets: BTreeMap<String, CArmDofs>,
}

impl StudyScenario {
    pub fn validate(&self) -> Result<(), EvaluationError> {
        if self.views.is_empty() {
            return Err(EvaluationError::NoViews {
                run: self.run.clone(),
                arm: self.arm,
            });
        }
        for v in &self.views {
            self.preset_for(v)?;
        }
        Ok(())
    }

    pub fn preset_for(&self, view: &str) -> Result<CArmDofs, EvaluationError> {
        self.presets
            .get(view)
            .copied()
            .or_else(|| CArmDofs::preset(view))
            .ok_or_else(|| EvaluationError::UnknownPreset { view: view.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionPurpose {
    /// Taken while searching for the view; counts toward dose.
    Repositioning,
    /// Single evaluation image after a cloud-guided restore.
    Verification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEventKind {
    /// The view as originally defined (ground truth).
    Target {
        pose: RigidTransform,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        keypoints: Option<KeypointSet>,
    },
    Acquisition {
        purpose: AcquisitionPurpose,
        keypoints: KeypointSet,
    },
    /// Pose the operator settled on.
    Final { pose: RigidTransform },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    /// Seconds since the start of the study.
    pub t: f64,
    pub run: String,
    pub arm: MethodArm,
    pub view: String,
    #[serde(flatten)]
    pub kind: RunEventKind,
}

/// Chronologically ordered study events.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    events: Vec<RunEvent>,
}

impl RunLog {
    pub fn new(events: Vec<RunEvent>) -> Result<Self, EvaluationError> {
        if let Some(i) = events.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(EvaluationError::OutOfOrder { index: i + 1 });
        }
        Ok(Self { events })
    }

    pub fn events(&self) -> &[RunEvent] {
        &self.events
    }

    pub fn push(&mut self, event: RunEvent) -> Result<(), EvaluationError> {
        if self.events.last().is_some_and(|last| event.t < last.t) {
            return Err(EvaluationError::OutOfOrder { index: self.events.len() });
        }
        self.events.push(event);
        Ok(())
    }

    /// Distinct `(run, arm)` pairs in first-seen order.
    pub fn runs(&self) -> Vec<(String, MethodArm)> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for e in &self.events {
            if seen.insert((e.run.clone(), e.arm)) {
                out.push((e.run.clone(), e.arm));
            }
        }
        out
    }
}

/// Result for one restored view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewOutcome {
    pub run: String,
    pub view: String,
    pub arm: MethodArm,
    pub delta: PoseDelta,
    /// Keypoint displacement of the first repositioning image (conventional).
    pub first_try_px: Option<f64>,
    /// Last repositioning image (conventional) or the verification image (proposed).
    pub final_px: Option<f64>,
    /// Repositioning acquisitions; verification images are not counted.
    pub xray_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: String,
    pub arm: MethodArm,
    pub views: Vec<ViewOutcome>,
    pub pose_stats: PoseErrorStats,
    pub total_xrays: usize,
    pub xrays_per_view: f64,
}

#[derive(Default)]
struct ViewRecords<'a> {
    target: Option<(&'a RigidTransform, Option<&'a KeypointSet>)>,
    final_pose: Option<&'a RigidTransform>,
    repositioning: Vec<&'a KeypointSet>,
    verification: Vec<&'a KeypointSet>,
}

/// Evaluates the events of `scenario.run` / `scenario.arm` in `log`.
pub fn run_study(scenario: &StudyScenario, log: &RunLog) -> Result<RunReport, EvaluationError> {
    scenario.validate()?;
    let mut records: BTreeMap<&str, ViewRecords<'_>> =
        scenario.views.iter().map(|v| (v.as_str(), ViewRecords::default())).collect();
    for e in log
        .events()
        .iter()
        .filter(|e| e.run == scenario.run && e.arm == scenario.arm)
    {
        let rec = records
            .get_mut(e.view.as_str())
            .ok_or_else(|| EvaluationError::UndefinedView {
                run: scenario.run.clone(),
                view: e.view.clone(),
            })?;
        match &e.kind {
            RunEventKind::Target { pose, keypoints } => rec.target = Some((pose, keypoints.as_ref())),
            RunEventKind::Final { pose } => rec.final_pose = Some(pose),
            RunEventKind::Acquisition { purpose, keypoints } => match purpose {
                AcquisitionPurpose::Repositioning => rec.repositioning.push(keypoints),
                AcquisitionPurpose::Verification => rec.verification.push(keypoints),
            },
        }
    }

    let missing = |view: &str, what| EvaluationError::MissingRecord {
        run: scenario.run.clone(),
        view: view.to_string(),
        what,
    };
    let mut views = Vec::with_capacity(scenario.views.len());
    for name in &scenario.views {
        let rec = &records[name.as_str()];
        let (target, target_kp) = rec.target.ok_or_else(|| missing(name, "target"))?;
        let final_pose = rec.final_pose.ok_or_else(|| missing(name, "final"))?;
        let disp = |img: Option<&&KeypointSet>| -> Option<f64> {
            keypoint_displacement(target_kp?, img?).ok()
        };
        let (first_try_px, final_px) = match scenario.arm {
            MethodArm::Conventional => (disp(rec.repositioning.first()), disp(rec.repositioning.last())),
            MethodArm::Proposed => (None, disp(rec.verification.last())),
        };
        views.push(ViewOutcome {
            run: scenario.run.clone(),
            view: name.clone(),
            arm: scenario.arm,
            delta: pose_delta(final_pose, target),
            first_try_px,
            final_px,
            xray_count: rec.repositioning.len(),
        });
    }
    let deltas: Vec<PoseDelta> = views.iter().map(|v| v.delta).collect();
    let total_xrays = views.iter().map(|v| v.xray_count).sum();
    Ok(RunReport {
        run: scenario.run.clone(),
        arm: scenario.arm,
        pose_stats: stats_from_deltas(&deltas)?,
        total_xrays,
        xrays_per_view: total_xrays as f64 / views.len() as f64,
        views,
    })
}

/// Aggregate over all included runs of one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: MethodArm,
    pub runs: Vec<String>,
    pub view_count: usize,
    pub pose_stats: PoseErrorStats,
    pub first_try_px: Option<MeanSd>,
    pub final_px: Option<MeanSd>,
    pub total_xrays: usize,
    /// Exact `total_xrays / view_count`.
    pub xrays_per_view: f64,
}

/// Pools the per-view outcomes of `reports` per arm, skipping `excluded` runs.
pub fn summarize(reports: &[RunReport], excluded: &[String]) -> Result<Vec<ArmSummary>, EvaluationError> {
    let mut by_arm: BTreeMap<MethodArm, Vec<&RunReport>> = BTreeMap::new();
    for r in reports.iter().filter(|r| !excluded.contains(&r.run)) {
        by_arm.entry(r.arm).or_default().push(r);
    }
    by_arm
        .into_iter()
        .map(|(arm, runs)| {
            let outcomes: Vec<&ViewOutcome> = runs.iter().flat_map(|r| r.views.iter()).collect();
            let deltas: Vec<PoseDelta> = outcomes.iter().map(|o| o.delta).collect();
            let total_xrays = outcomes.iter().map(|o| o.xray_count).sum::<usize>();
            Ok(ArmSummary {
                arm,
                runs: runs.iter().map(|r| r.run.clone()).collect(),
                view_count: outcomes.len(),
                pose_stats: stats_from_deltas(&deltas)?,
                first_try_px: mean_sd(outcomes.iter().filter_map(|o| o.first_try_px)),
                final_px: mean_sd(outcomes.iter().filter_map(|o| o.final_px)),
                total_xrays,
                xrays_per_view: total_xrays as f64 / outcomes.len() as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn kp(points: &[(&str, f64, f64)]) -> KeypointSet {
        let mut s = KeypointSet::new();
        for (id, u, v) in points {
            s.insert(*id, *u, *v);
        }
        s
    }

    #[test]
    fn single_translation_pair() {
        let s = pose_error_stats(&[(
            RigidTransform::from_translation(10.0, 0.0, 0.0),
            RigidTransform::identity(),
        )])
        .unwrap();
        assert_eq!((s.distance.mean, s.distance.sd), (10.0, 0.0));
        assert_eq!((s.angle.mean, s.angle.sd), (0.0, 0.0));
    }

    #[test]
    fn sample_sd_of_three_four_five() {
        let pairs: Vec<_> = [3.0, 4.0, 5.0]
            .iter()
            .map(|d| (RigidTransform::from_translation(*d, 0.0, 0.0), RigidTransform::identity()))
            .collect();
        let s = pose_error_stats(&pairs).unwrap();
        assert_eq!(s.distance.mean, 4.0);
        assert_eq!(s.distance.sd, 1.0);
    }

    #[test]
    fn empty_input_rejected() {
        assert_eq!(pose_error_stats(&[]), Err(EvaluationError::Empty));
    }

    #[test]
    fn repeated_pair_has_zero_spread() {
        let pair = (
            RigidTransform::from_axis_angle_deg(crate::geometry::Vec3::new(0.3, 0.1, 1.0), 1.7)
                .with_translation(crate::geometry::Vec3::new(0.1, 0.2, 0.3)),
            RigidTransform::identity(),
        );
        let s = pose_error_stats(&vec![pair; 7]).unwrap();
        assert_eq!(s.distance.sd, 0.0);
        assert_eq!(s.angle.sd, 0.0);
    }

    #[test]
    fn displacement_examples() {
        let a = kp(&[("k1", 100.0, 200.0), ("k2", 300.0, 50.0), ("k3", 10.0, 10.0)]);
        assert_eq!(keypoint_displacement(&a, &a).unwrap(), 0.0);
        assert_eq!(keypoint_displacement(&a, &a.shifted(3.0, 4.0)).unwrap(), 5.0);
        // Shared ids k1, k2: distances 5 and 13 by hand → mean 9.
        let b = kp(&[("k1", 103.0, 204.0), ("k2", 305.0, 62.0), ("k9", 0.0, 0.0)]);
        assert_eq!(keypoint_displacement(&a, &b).unwrap(), 9.0);
        assert_eq!(
            keypoint_displacement(&a, &kp(&[("zz", 0.0, 0.0)])),
            Err(EvaluationError::NoSharedKeypoints)
        );
    }

    #[test]
    fn log_must_be_chronological() {
        let e = |t| RunEvent {
            t,
            run: "r".into(),
            arm: MethodArm::Proposed,
            view: "inlet".into(),
            kind: RunEventKind::Final { pose: RigidTransform::identity() },
        };
        assert_eq!(RunLog::new(vec![e(1.0), e(0.5)]), Err(EvaluationError::OutOfOrder { index: 1 }));
        assert!(RunLog::new(vec![e(0.5), e(0.5), e(1.0)]).is_ok());
    }
}
