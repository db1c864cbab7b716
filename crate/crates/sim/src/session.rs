//! Session engine: owns the simulated operating-room state and applies
//! commands one at a time.
//!
//! Every successful command increments the sequence number exactly once.
//! A failing command leaves the state untouched and produces no events.
//! Time is event-driven: the session clock in seconds equals the sequence
//! number, so replaying a command stream reproduces every timestamp.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use carm_core::depth::{render_depth, unproject_depth, Scene};
use carm_core::evaluation::{
    run_study, AcquisitionPurpose, EvaluationError, KeypointSet, RunEvent, RunEventKind, RunLog, RunReport, StudyScenario,
};
use carm_core::geometry::{FrameId, FrameTransform, RigidTransform, TaggedPointCloud, Vec3};
use carm_core::icp::{align_with_hints, AlignmentReport, Band};
use carm_core::kinematics::{forward_kinematics, project_with_poses, surface_primitives, CArmDofs, CArmPoses, XrayProjection, DOF_NAMES};
use carm_core::registry::{save_view, show_view, ViewRegistry};
use carm_core::tracker::{solve_pose, synthesize_observations};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    SaveView,
    ShowView,
    HideView,
    ToggleLive,
    SetDofs,
    AdjustDof,
    AcquireXray,
    RequestAlignment,
    ResetNeutral,
    /// Moves the simulated technician (head pose ground truth).
    MoveTechnician,
}

impl Verb {
    pub const ALL: [Verb; 10] = [
        Verb::SaveView,
        Verb::ShowView,
        Verb::HideView,
        Verb::ToggleLive,
        Verb::SetDofs,
        Verb::AdjustDof,
        Verb::AcquireXray,
        Verb::RequestAlignment,
        Verb::ResetNeutral,
        Verb::MoveTechnician,
    ];

    pub fn parse(s: &str) -> Option<Verb> {
        serde_json::from_value(Value::String(s.to_string())).ok()
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Verb::SaveView => "save_view",
            Verb::ShowView => "show_view",
            Verb::HideView => "hide_view",
            Verb::ToggleLive => "toggle_live",
            Verb::SetDofs => "set_dofs",
            Verb::AdjustDof => "adjust_dof",
            Verb::AcquireXray => "acquire_xray",
            Verb::RequestAlignment => "request_alignment",
            Verb::ResetNeutral => "reset_neutral",
            Verb::MoveTechnician => "move_technician",
        }
    }
}

/// A client request. The verb stays a string so unknown verbs produce an
/// error reply rather than a parse failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandMessage {
    pub verb: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub args: Value,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub request_id: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_id: Option<String>,
}

impl CommandMessage {
    pub fn new(verb: Verb, args: Value) -> Self {
        Self {
            verb: verb.as_str().to_string(),
            args,
            request_id: Value::Null,
            client_id: None,
        }
    }

    pub fn with_request_id(mut self, id: impl Into<Value>) -> Self {
        self.request_id = id.into();
        self
    }

    pub fn with_client(mut self, client: impl Into<String>) -> Self {
        self.client_id = Some(client.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub request_id: Value,
    pub ok: bool,
    /// Sequence number after the command (unchanged on error).
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Echo of a successful command, broadcast to every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub verb: Verb,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_id: Option<String>,
    pub detail: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    pub seq: u64,
    pub view: String,
    pub purpose: AcquisitionPurpose,
    pub keypoints: KeypointSet,
    pub dofs: CArmDofs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub seq: u64,
    pub dofs: CArmDofs,
    /// Simulated ground truth `world_from_technician`.
    pub technician_truth: RigidTransform,
    /// Tracked `world_from_technician` used for every mapping.
    pub tracker_pose: RigidTransform,
    pub tracker_rms: f64,
    pub shown_view: Option<String>,
    pub live_visible: bool,
    pub registry: ViewRegistry,
    /// DOFs at which each view was saved.
    pub view_dofs: BTreeMap<String, CArmDofs>,
    /// Repositioning and verification acquisitions per view label.
    pub xray_counts: BTreeMap<String, usize>,
    pub acquisitions: Vec<Acquisition>,
    pub latest_alignment: Option<AlignmentReport>,
    /// Bumped whenever what the depth sensor sees changes.
    pub sensor_epoch: u64,
    pub study_log: RunLog,
}

impl SessionState {
    pub fn initial(config: &SimConfig) -> Self {
        Self {
            seq: 0,
            dofs: CArmDofs::neutral(),
            technician_truth: config.technician_pose,
            tracker_pose: config.technician_pose,
            tracker_rms: 0.0,
            shown_view: None,
            live_visible: true,
            registry: ViewRegistry::new(),
            view_dofs: BTreeMap::new(),
            xray_counts: BTreeMap::new(),
            acquisitions: Vec::new(),
            latest_alignment: None,
            sensor_epoch: 0,
            study_log: RunLog::default(),
        }
    }

    pub fn clock(&self) -> f64 {
        self.seq as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudPayload {
    pub frame: FrameId,
    /// Points before decimation.
    pub total_points: usize,
    pub points: Vec<[f64; 3]>,
}

impl CloudPayload {
    fn from_cloud(cloud: &TaggedPointCloud, max_points: usize) -> Self {
        let d = cloud.decimated(max_points);
        Self {
            frame: d.frame(),
            total_points: cloud.len(),
            points: d.points().iter().map(|p| [p.x, p.y, p.z]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotPoses {
    pub gantry: RigidTransform,
    pub source: RigidTransform,
    pub detector: RigidTransform,
    /// Tracked `world_from_technician`.
    pub technician: RigidTransform,
    /// `world_from_sensor` from the tracked pose.
    pub sensor: RigidTransform,
}

/// Consistent view of the session for clients. Clouds are in the
/// technician frame and decimated for transport.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub seq: u64,
    pub dofs: CArmDofs,
    pub poses: SnapshotPoses,
    pub live_visible: bool,
    pub live_cloud: Option<CloudPayload>,
    pub shown_view: Option<String>,
    pub shown_cloud: Option<CloudPayload>,
    pub views: Vec<String>,
    pub alignment: Option<AlignmentReport>,
    pub band: Option<Band>,
    pub xray_counts: BTreeMap<String, usize>,
    pub events: Vec<SessionEvent>,
}

/// Result of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub reply: Reply,
    pub events: Vec<SessionEvent>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{0}")]
pub struct CommandError(pub String);

fn err(msg: impl Into<String>) -> CommandError {
    CommandError(msg.into())
}

fn to_err<E: std::fmt::Display>(e: E) -> CommandError {
    CommandError(e.to_string())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NameArgs {
    name: String,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct NoArgs {}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ToggleArgs {
    on: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdjustArgs {
    dof: String,
    delta: f64,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct AcquireArgs {
    view: Option<String>,
    purpose: Option<AcquisitionPurpose>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct AlignArgs {
    name: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MoveArgs {
    pose: RigidTransform,
    #[serde(default)]
    relative: bool,
}

fn parse_args<T: serde::de::DeserializeOwned + Default>(args: &Value) -> Result<T, CommandError> {
    if args.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(args.clone()).map_err(|e| err(format!("invalid arguments: {e}")))
}

fn parse_required<T: serde::de::DeserializeOwned>(args: &Value) -> Result<T, CommandError> {
    serde_json::from_value(args.clone()).map_err(|e| err(format!("invalid arguments: {e}")))
}

/// Session state plus the configuration and render cache around it.
#[derive(Debug, Clone)]
pub struct Session {
    config: Arc<SimConfig>,
    state: SessionState,
    live_cache: Option<(u64, Arc<TaggedPointCloud>)>,
    last_events: Vec<SessionEvent>,
}

impl Session {
    pub fn new(config: SimConfig) -> Self {
        let state = SessionState::initial(&config);
        Self {
            config: Arc::new(config),
            state,
            live_cache: None,
            last_events: Vec::new(),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn poses(&self) -> CArmPoses {
        forward_kinematics(&self.state.dofs, &self.config.geometry).expect("session DOFs are always valid")
    }

    /// Applies one command. On error the state is unchanged.
    pub fn handle_command(&mut self, cmd: &CommandMessage) -> Outcome {
        let result = match Verb::parse(&cmd.verb) {
            Some(verb) => self.dispatch(verb, &cmd.args).map(|d| (verb, d)),
            None => Err(err(format!("unknown verb {:?}", cmd.verb))),
        };
        match result {
            Ok((verb, detail)) => {
                self.state.seq += 1;
                let event = SessionEvent {
                    seq: self.state.seq,
                    verb,
                    client_id: cmd.client_id.clone(),
                    detail: detail.clone(),
                };
                self.last_events = vec![event.clone()];
                Outcome {
                    reply: Reply {
                        request_id: cmd.request_id.clone(),
                        ok: true,
                        seq: self.state.seq,
                        data: Some(detail),
                        error: None,
                    },
                    events: vec![event],
                }
            }
            Err(e) => Outcome {
                reply: Reply {
                    request_id: cmd.request_id.clone(),
                    ok: false,
                    seq: self.state.seq,
                    data: None,
                    error: Some(e.0),
                },
                events: Vec::new(),
            },
        }
    }

    /// Runs every fallible step of `verb` first and only then mutates the
    /// state, so an error leaves it as it was.
    fn dispatch(&mut self, verb: Verb, args: &Value) -> Result<Value, CommandError> {
        // Time stamp the command will carry once committed.
        let now = (self.state.seq + 1) as f64;
        match verb {
            Verb::SaveView => {
                let NameArgs { name } = parse_required(args)?;
                let sensor = self.live_sensor_cloud()?;
                let s = &self.state;
                let mut view = save_view(&name, &sensor, &s.tracker_pose, &self.config.ir_extrinsic, now).map_err(to_err)?;
                let poses = self.poses();
                let keypoints = self.project_keypoints(&poses);
                view.reference_keypoints = Some(keypoints.clone());
                view.ground_truth_gantry = Some(poses.gantry);
                let points = view.cloud.len();
                let target = self.event(&name, now, RunEventKind::Target { pose: poses.gantry, keypoints: Some(keypoints) });
                let s = &mut self.state;
                s.study_log.push(target).map_err(to_err)?;
                s.registry.insert(view);
                s.view_dofs.insert(name.clone(), s.dofs);
                Ok(json!({ "name": name, "points": points, "t0": now }))
            }
            Verb::ShowView => {
                let NameArgs { name } = parse_required(args)?;
                self.state.registry.get(&name).map_err(to_err)?;
                self.state.shown_view = Some(name.clone());
                Ok(json!({ "name": name }))
            }
            Verb::HideView => {
                let NoArgs {} = parse_args(args)?;
                let hidden = self.state.shown_view.take();
                Ok(json!({ "hidden": hidden }))
            }
            Verb::ToggleLive => {
                let ToggleArgs { on } = parse_args(args)?;
                let s = &mut self.state;
                s.live_visible = on.unwrap_or(!s.live_visible);
                Ok(json!({ "live_visible": s.live_visible }))
            }
            Verb::SetDofs => {
                let values: BTreeMap<String, f64> = parse_required(args)?;
                if values.is_empty() {
                    return Err(err("set_dofs needs at least one DOF"));
                }
                let mut dofs = self.state.dofs;
                for (name, v) in &values {
                    dofs = dofs.with_dof(name, *v).ok_or_else(|| err(format!("unknown DOF {name:?}")))?;
                }
                dofs.validate().map_err(to_err)?;
                self.set_dofs(dofs);
                Ok(json!({ "dofs": dofs }))
            }
            Verb::AdjustDof => {
                let AdjustArgs { dof, delta } = parse_required(args)?;
                let i = DOF_NAMES
                    .iter()
                    .position(|n| *n == dof)
                    .ok_or_else(|| err(format!("unknown DOF {dof:?}")))?;
                let mut a = self.state.dofs.to_array();
                a[i] += delta;
                let dofs = CArmDofs::from_array(a);
                dofs.validate().map_err(to_err)?;
                self.set_dofs(dofs);
                Ok(json!({ "dofs": dofs }))
            }
            Verb::ResetNeutral => {
                let NoArgs {} = parse_args(args)?;
                self.set_dofs(CArmDofs::neutral());
                Ok(json!({ "dofs": CArmDofs::neutral() }))
            }
            Verb::AcquireXray => {
                let AcquireArgs { view, purpose } = parse_args(args)?;
                let view = view
                    .or_else(|| self.state.shown_view.clone())
                    .ok_or_else(|| err("acquire_xray needs a view label when no view is shown"))?;
                if view.is_empty() {
                    return Err(err("view label must not be empty"));
                }
                let purpose = purpose.unwrap_or(AcquisitionPurpose::Repositioning);
                let poses = self.poses();
                let keypoints = self.project_keypoints(&poses);
                let acquisition = self.event(&view, now, RunEventKind::Acquisition { purpose, keypoints: keypoints.clone() });
                let final_pose = self.event(&view, now, RunEventKind::Final { pose: poses.gantry });
                let s = &mut self.state;
                s.study_log.push(acquisition).map_err(to_err)?;
                s.study_log.push(final_pose).map_err(to_err)?;
                let count = s.xray_counts.entry(view.clone()).or_default();
                *count += 1;
                let count = *count;
                s.acquisitions.push(Acquisition {
                    seq: s.seq + 1,
                    view: view.clone(),
                    purpose,
                    keypoints: keypoints.clone(),
                    dofs: s.dofs,
                });
                Ok(json!({ "view": view, "purpose": purpose, "keypoints": keypoints, "count": count }))
            }
            Verb::RequestAlignment => {
                let AlignArgs { name } = parse_args(args)?;
                let name = name
                    .or_else(|| self.state.shown_view.clone())
                    .ok_or_else(|| err("request_alignment needs a view name when no view is shown"))?;
                self.state.registry.get(&name).map_err(to_err)?;
                let live = self.live_world_cloud()?;
                let saved = &self.state.registry.get(&name).map_err(to_err)?.cloud;
                let report = align_with_hints(&live, saved, &self.config.icp, &self.state.dofs, &self.config.geometry)
                    .map_err(to_err)?;
                let band = self.config.bands.classify_report(&report);
                self.state.latest_alignment = Some(report.clone());
                Ok(json!({ "name": name, "band": band, "report": report }))
            }
            Verb::MoveTechnician => {
                let MoveArgs { pose, relative } = parse_required(args)?;
                let s = &self.state;
                let truth = if relative { s.technician_truth.compose(&pose) } else { pose };
                let obs = synthesize_observations(&self.config.landmarks, &truth, &self.config.intrinsics, now);
                let est = solve_pose(&self.config.landmarks, &obs, &self.config.intrinsics, &s.tracker_pose).map_err(to_err)?;
                if !est.converged {
                    return Err(err(format!("tracker did not converge (rms {} px)", est.rms)));
                }
                let s = &mut self.state;
                s.technician_truth = truth;
                s.tracker_pose = est.pose;
                s.tracker_rms = est.rms;
                s.sensor_epoch += 1;
                Ok(json!({ "tracker_rms_px": est.rms, "iterations": est.iterations, "landmarks": obs.len() }))
            }
        }
    }

    fn set_dofs(&mut self, dofs: CArmDofs) {
        if dofs != self.state.dofs {
            self.state.dofs = dofs;
            self.state.sensor_epoch += 1;
        }
    }

    fn event(&self, view: &str, t: f64, kind: RunEventKind) -> RunEvent {
        RunEvent {
            t,
            run: self.config.run.clone(),
            arm: self.config.arm,
            view: view.to_string(),
            kind,
        }
    }

    fn project_keypoints(&self, poses: &CArmPoses) -> KeypointSet {
        let mut set = KeypointSet::new();
        for kp in &self.config.keypoints {
            if let Ok(XrayProjection::Pixel { u, v }) = project_with_poses(&kp.position, poses, &self.config.geometry) {
                set.insert(kp.id.clone(), u, v);
            }
        }
        set
    }

    /// Depth-sensor cloud of the device as seen now (sensor frame), cached
    /// per sensor epoch.
    pub fn live_sensor_cloud(&mut self) -> Result<Arc<TaggedPointCloud>, CommandError> {
        let epoch = self.state.sensor_epoch;
        if let Some((e, cloud)) = &self.live_cache {
            if *e == epoch {
                return Ok(cloud.clone());
            }
        }
        let prims = surface_primitives(&self.state.dofs, &self.config.geometry).map_err(to_err)?;
        let world_from_sensor = self.state.technician_truth.compose(&self.config.ir_extrinsic);
        let seed = self.config.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let img = render_depth(
            Scene::Primitives(&prims),
            &world_from_sensor,
            &self.config.intrinsics,
            self.config.depth_noise_sigma,
            seed,
            self.state.clock(),
        )
        .map_err(to_err)?;
        let cloud = Arc::new(unproject_depth(&img));
        self.live_cache = Some((epoch, cloud.clone()));
        Ok(cloud)
    }

    /// Live cloud mapped to the world frame through the tracked pose.
    pub fn live_world_cloud(&mut self) -> Result<TaggedPointCloud, CommandError> {
        let sensor = self.live_sensor_cloud()?;
        let chain = FrameTransform::new(FrameId::World, FrameId::Technician, self.state.tracker_pose)
            .then_from(&FrameTransform::new(FrameId::Technician, FrameId::IrSensor, self.config.ir_extrinsic))
            .map_err(to_err)?;
        sensor.transformed(&chain).map_err(to_err)
    }

    pub fn snapshot(&mut self) -> StateSnapshot {
        let poses = self.poses();
        let max = self.config.snapshot_max_points;
        let tech_from_sensor = FrameTransform::new(FrameId::Technician, FrameId::IrSensor, self.config.ir_extrinsic);
        let live_cloud = if self.state.live_visible {
            self.live_sensor_cloud()
                .ok()
                .and_then(|c| c.transformed(&tech_from_sensor).ok())
                .map(|c| CloudPayload::from_cloud(&c, max))
        } else {
            None
        };
        let shown_cloud = self.state.shown_view.as_ref().and_then(|name| {
            let view = self.state.registry.get(name).ok()?;
            show_view(view, &self.state.tracker_pose).ok().map(|c| CloudPayload::from_cloud(&c, max))
        });
        let alignment = self.state.latest_alignment.clone();
        StateSnapshot {
            seq: self.state.seq,
            dofs: self.state.dofs,
            poses: SnapshotPoses {
                gantry: poses.gantry,
                source: poses.source,
                detector: poses.detector,
                technician: self.state.tracker_pose,
                sensor: self.state.tracker_pose.compose(&self.config.ir_extrinsic),
            },
            live_visible: self.state.live_visible,
            live_cloud,
            shown_view: self.state.shown_view.clone(),
            shown_cloud,
            views: self.state.registry.names().into_iter().map(str::to_string).collect(),
            band: alignment.as_ref().map(|r| self.config.bands.classify_report(r)),
            alignment,
            xray_counts: self.state.xray_counts.clone(),
            events: self.last_events.clone(),
        }
    }

    /// Study scenario covering every view with a target and a final pose,
    /// in save order, with the DOFs each view was saved at as its preset.
    pub fn study_scenario(&self) -> StudyScenario {
        let mut views: Vec<String> = Vec::new();
        let mut has_final = BTreeSet::new();
        for e in self.state.study_log.events() {
            match e.kind {
                RunEventKind::Target { .. } if !views.contains(&e.view) => views.push(e.view.clone()),
                RunEventKind::Final { .. } => {
                    has_final.insert(e.view.as_str());
                }
                _ => {}
            }
        }
        views.retain(|v| has_final.contains(v.as_str()));
        let presets = views
            .iter()
            .filter_map(|v| Some((v.clone(), *self.state.view_dofs.get(v)?)))
            .collect();
        StudyScenario {
            run: self.config.run.clone(),
            arm: self.config.arm,
            views,
            presets,
        }
    }

    /// Evaluates the session's own study events (see [`Self::study_scenario`]).
    pub fn study_report(&self) -> Result<RunReport, EvaluationError> {
        let scenario = self.study_scenario();
        let events = self
            .state
            .study_log
            .events()
            .iter()
            .filter(|e| scenario.views.contains(&e.view))
            .cloned()
            .collect();
        run_study(&scenario, &RunLog::new(events)?)
    }
}

/// Builds a relative technician move from a rotation vector (degrees) and
/// translation (mm), for tests and tools.
pub fn technician_move(rotvec_deg: Vec3, translation: Vec3) -> RigidTransform {
    RigidTransform::from_rotation_vector(rotvec_deg.map(f64::to_radians), translation)
}
