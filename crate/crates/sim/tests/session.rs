use carm_core::evaluation::{AcquisitionPurpose, MethodArm};
use carm_core::geometry::Vec3;
use carm_core::icp::Band;
use carm_core::kinematics::CArmDofs;
use carm_sim::config::SimConfig;
use carm_sim::session::{technician_move, CloudPayload, CommandMessage, Session, Verb};
use serde_json::{json, Value};

fn cmd(verb: Verb, args: Value) -> CommandMessage {
    CommandMessage::new(verb, args)
}

fn max_point_gap(a: &CloudPayload, b: &CloudPayload) -> f64 {
    assert_eq!(a.points.len(), b.points.len());
    a.points
        .iter()
        .zip(&b.points)
        .map(|(p, q)| Vec3::from(*p) - Vec3::from(*q))
        .map(|d| d.norm())
        .fold(0.0, f64::max)
}

#[test]
fn reset_neutral_sets_neutral_and_bumps_seq() {
    let mut s = Session::new(SimConfig::default());
    s.handle_command(&cmd(Verb::SetDofs, json!({ "orbital": 30.0, "base_x": 100.0 })));
    let before = s.state().seq;
    let out = s.handle_command(&cmd(Verb::ResetNeutral, Value::Null).with_request_id(7));
    assert!(out.reply.ok);
    assert_eq!(out.reply.request_id, json!(7));
    assert_eq!(s.state().dofs, CArmDofs::neutral());
    assert_eq!(s.state().seq, before + 1);
    assert_eq!(out.events.len(), 1);
}

#[test]
fn save_then_show_reproduces_live_cloud() {
    let mut s = Session::new(SimConfig::default());
    assert!(s.handle_command(&cmd(Verb::SaveView, json!({ "name": "Position 1" }))).reply.ok);
    assert!(s.handle_command(&cmd(Verb::ShowView, json!({ "name": "Position 1" }))).reply.ok);
    let snap = s.snapshot();
    let live = snap.live_cloud.expect("live cloud");
    let shown = snap.shown_cloud.expect("shown cloud");
    assert!(live.total_points > 1000);
    assert_eq!(live.total_points, shown.total_points);
    assert!(max_point_gap(&live, &shown) <= 1e-9);
}

#[test]
fn shown_cloud_stays_anchored_in_world_when_technician_moves() {
    let mut s = Session::new(SimConfig::default());
    s.handle_command(&cmd(Verb::SaveView, json!({ "name": "a" })));
    s.handle_command(&cmd(Verb::ShowView, json!({ "name": "a" })));
    let before = s.snapshot().shown_cloud.unwrap();
    let pose = technician_move(Vec3::new(0.0, 3.0, -5.0), Vec3::new(150.0, 80.0, -20.0));
    let out = s.handle_command(&cmd(Verb::MoveTechnician, json!({ "pose": pose, "relative": true })));
    assert!(out.reply.ok, "{:?}", out.reply.error);
    let after = s.snapshot().shown_cloud.unwrap();
    assert!(max_point_gap(&before, &after) > 10.0);

    let world_from_tech = s.state().tracker_pose;
    let saved = s.state().registry.get("a").unwrap().cloud.points().to_vec();
    assert_eq!(saved.len(), after.points.len());
    let gap = saved
        .iter()
        .zip(&after.points)
        .map(|(w, p)| (world_from_tech.apply(&Vec3::from(*p)) - w).norm())
        .fold(0.0, f64::max);
    assert!(gap < 1e-6, "{gap}");
}

#[test]
fn unknown_view_is_rejected_without_events() {
    let mut s = Session::new(SimConfig::default());
    s.handle_command(&cmd(Verb::SaveView, json!({ "name": "Position 1" })));
    let before = s.state().clone();
    let out = s.handle_command(&cmd(Verb::ShowView, json!({ "name": "Position 9" })).with_request_id("r9"));
    assert!(!out.reply.ok);
    assert_eq!(out.reply.request_id, json!("r9"));
    assert!(out.reply.error.unwrap().contains("Position 9"));
    assert!(out.events.is_empty());
    assert_eq!(s.state(), &before);
}

#[test]
fn invalid_commands_leave_state_unchanged() {
    let mut s = Session::new(SimConfig::default());
    s.handle_command(&cmd(Verb::SetDofs, json!({ "orbital": 10.0 })));
    let before = s.state().clone();
    let bad = [
        CommandMessage {
            verb: "teleport".into(),
            ..cmd(Verb::HideView, Value::Null)
        },
        cmd(Verb::SetDofs, json!({ "orbital": 500.0 })),
        cmd(Verb::SetDofs, json!({ "orbital": 20.0, "warp": 1.0 })),
        cmd(Verb::SetDofs, json!({})),
        cmd(Verb::AdjustDof, json!({ "dof": "swivel", "delta": 40.0 })),
        cmd(Verb::AdjustDof, json!({ "dof": "nope", "delta": 1.0 })),
        cmd(Verb::SaveView, json!({})),
        cmd(Verb::SaveView, json!({ "name": 3 })),
        cmd(Verb::AcquireXray, Value::Null),
        cmd(Verb::RequestAlignment, json!({ "name": "missing" })),
        cmd(Verb::ToggleLive, json!({ "on": "yes" })),
        cmd(Verb::ResetNeutral, json!({ "extra": 1 })),
    ];
    for c in &bad {
        let out = s.handle_command(c);
        assert!(!out.reply.ok, "{c:?} accepted");
        assert!(out.events.is_empty());
        assert_eq!(s.state(), &before, "{c:?} changed state");
    }
}

#[test]
fn acquisition_counts_are_conserved() {
    let mut s = Session::new(SimConfig::default());
    s.handle_command(&cmd(Verb::SaveView, json!({ "name": "inlet" })));
    s.handle_command(&cmd(Verb::ShowView, json!({ "name": "inlet" })));
    for _ in 0..3 {
        let out = s.handle_command(&cmd(Verb::AcquireXray, Value::Null));
        assert!(out.reply.ok);
        let kp = out.reply.data.unwrap()["keypoints"].as_object().unwrap().len();
        assert_eq!(kp, 4);
    }
    s.handle_command(&cmd(Verb::AcquireXray, json!({ "view": "outlet", "purpose": "verification" })));
    assert_eq!(s.state().xray_counts["inlet"], 3);
    assert_eq!(s.state().xray_counts["outlet"], 1);
    assert_eq!(s.state().acquisitions.len(), 4);
    assert_eq!(s.state().acquisitions[3].purpose, AcquisitionPurpose::Verification);
    assert_eq!(s.snapshot().xray_counts, s.state().xray_counts);
}

#[test]
fn toggle_live_hides_only_the_live_layer() {
    let mut s = Session::new(SimConfig::default());
    s.handle_command(&cmd(Verb::SaveView, json!({ "name": "a" })));
    s.handle_command(&cmd(Verb::ShowView, json!({ "name": "a" })));
    let out = s.handle_command(&cmd(Verb::ToggleLive, Value::Null));
    assert_eq!(out.reply.data.unwrap()["live_visible"], json!(false));
    let snap = s.snapshot();
    assert!(snap.live_cloud.is_none());
    assert!(snap.shown_cloud.is_some());
    s.handle_command(&cmd(Verb::ToggleLive, json!({ "on": true })));
    assert!(s.snapshot().live_cloud.is_some());
}

#[test]
fn hide_view_clears_the_shown_view() {
    let mut s = Session::new(SimConfig::default());
    s.handle_command(&cmd(Verb::SaveView, json!({ "name": "a" })));
    s.handle_command(&cmd(Verb::SaveView, json!({ "name": "b" })));
    s.handle_command(&cmd(Verb::ShowView, json!({ "name": "a" })));
    s.handle_command(&cmd(Verb::ShowView, json!({ "name": "b" })));
    assert_eq!(s.state().shown_view.as_deref(), Some("b"));
    s.handle_command(&cmd(Verb::HideView, Value::Null));
    assert!(s.snapshot().shown_cloud.is_none());
}

#[test]
fn alignment_reports_and_bands() {
    let mut s = Session::new(SimConfig::default());
    s.handle_command(&cmd(Verb::SaveView, json!({ "name": "a" })));
    let out = s.handle_command(&cmd(Verb::RequestAlignment, json!({ "name": "a" })));
    assert!(out.reply.ok, "{:?}", out.reply.error);
    assert_eq!(out.reply.data.unwrap()["band"], json!("green"));

    s.handle_command(&cmd(Verb::AdjustDof, json!({ "dof": "base_x", "delta": 12.0 })));
    s.handle_command(&cmd(Verb::ShowView, json!({ "name": "a" })));
    let out = s.handle_command(&cmd(Verb::RequestAlignment, Value::Null));
    assert!(out.reply.ok, "{:?}", out.reply.error);
    let report = s.state().latest_alignment.clone().unwrap();
    // Live and saved clouds are independent samplings of the surface.
    assert!((report.distance_mm - 12.0).abs() < 2.0, "{}", report.distance_mm);
    assert_eq!(s.snapshot().band, Some(Band::Amber));
}

#[test]
fn session_study_report_counts_acquisitions() {
    let cfg = SimConfig {
        arm: MethodArm::Conventional,
        ..SimConfig::default()
    };
    let mut s = Session::new(cfg);
    s.handle_command(&cmd(Verb::SetDofs, serde_json::to_value(CArmDofs::preset("inlet").unwrap()).unwrap()));
    s.handle_command(&cmd(Verb::SaveView, json!({ "name": "inlet" })));
    s.handle_command(&cmd(Verb::ResetNeutral, Value::Null));
    s.handle_command(&cmd(Verb::SetDofs, json!({ "angular_tilt": -38.0 })));
    s.handle_command(&cmd(Verb::AcquireXray, json!({ "view": "inlet" })));
    s.handle_command(&cmd(Verb::SetDofs, json!({ "angular_tilt": -40.0 })));
    s.handle_command(&cmd(Verb::AcquireXray, json!({ "view": "inlet" })));
    let report = s.study_report().unwrap();
    assert_eq!(report.total_xrays, 2);
    let v = &report.views[0];
    assert_eq!(v.xray_count, 2);
    assert!(v.delta.distance < 1e-9 && v.delta.angle < 1e-6);
    assert!(v.final_px.unwrap() < 1e-9);
    assert!(v.first_try_px.unwrap() > 1.0);
}
