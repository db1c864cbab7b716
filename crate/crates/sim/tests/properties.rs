use std::collections::BTreeMap;

use carm_core::geometry::{FrameId, RigidTransform, Vec3};
use carm_sim::config::SimConfig;
use carm_sim::ply::{read_ply, write_ply};
use carm_sim::pose::PoseRecord;
use carm_sim::session::{CommandMessage, Session, Verb};
use proptest::prelude::*;
use serde_json::json;

fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn transform() -> impl Strategy<Value = RigidTransform> {
    (vec3(1.0), 0.0..180.0f64, vec3(3000.0)).prop_filter_map("degenerate axis", |(axis, angle, t)| {
        (axis.norm() > 1e-3).then(|| RigidTransform::from_axis_angle_deg(axis, angle).with_translation(t))
    })
}

#[derive(Debug, Clone)]
enum Op {
    Acquire(usize),
    Adjust(usize, f64),
    Show(usize),
    Hide,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..3usize).prop_map(Op::Acquire),
        (0..7usize, -60.0..60.0f64).prop_map(|(i, d)| Op::Adjust(i, d)),
        (0..3usize).prop_map(Op::Show),
        Just(Op::Hide),
    ]
}

const VIEWS: [&str; 3] = ["a", "b", "c"];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ply_round_trip_is_float32_exact(points in prop::collection::vec(vec3(5000.0), 0..200)) {
        let mut buf = Vec::new();
        write_ply(&mut buf, FrameId::World, &points).unwrap();
        let (frame, back) = read_ply(&buf[..]).unwrap();
        prop_assert_eq!(frame, Some(FrameId::World));
        prop_assert_eq!(back.len(), points.len());
        for (p, q) in points.iter().zip(&back) {
            prop_assert_eq!(p.map(|c| c as f32 as f64), *q);
        }
    }

    #[test]
    fn pose_record_round_trip_is_bit_exact(t in transform()) {
        let rec = PoseRecord::from(&t);
        let text = serde_json::to_string(&rec).unwrap();
        let back: PoseRecord = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back.to_transform().unwrap(), t);
    }

    #[test]
    fn session_bookkeeping(ops in prop::collection::vec(op(), 1..40)) {
        let mut s = Session::new(SimConfig::default());
        let mut accepted = 0u64;
        let mut acquired: BTreeMap<String, usize> = BTreeMap::new();
        let mut last_seq = 0;
        for op in ops {
            let cmd = match op {
                Op::Acquire(v) => CommandMessage::new(Verb::AcquireXray, json!({ "view": VIEWS[v] })),
                Op::Adjust(i, d) => CommandMessage::new(Verb::AdjustDof, json!({ "dof": carm_core::kinematics::DOF_NAMES[i], "delta": d })),
                Op::Show(v) => CommandMessage::new(Verb::ShowView, json!({ "name": VIEWS[v] })),
                Op::Hide => CommandMessage::new(Verb::HideView, serde_json::Value::Null),
            };
            let before = s.state().clone();
            let out = s.handle_command(&cmd);
            if out.reply.ok {
                accepted += 1;
                if let Op::Acquire(v) = op {
                    *acquired.entry(VIEWS[v].to_string()).or_default() += 1;
                }
                prop_assert_eq!(out.events.len(), 1);
            } else {
                prop_assert!(out.events.is_empty());
                prop_assert_eq!(s.state(), &before);
            }
            prop_assert!(s.state().seq >= last_seq);
            last_seq = s.state().seq;
            s.state().dofs.validate().unwrap();
        }
        prop_assert_eq!(s.state().seq, accepted);
        prop_assert_eq!(&s.state().xray_counts, &acquired);
    }
}

#[test]
fn snapshot_clouds_respect_the_point_budget() {
    for budget in [1, 500, 20_000] {
        let cfg = SimConfig {
            snapshot_max_points: budget,
            ..SimConfig::default()
        };
        let mut s = Session::new(cfg);
        s.handle_command(&CommandMessage::new(Verb::SaveView, json!({ "name": "a" })));
        s.handle_command(&CommandMessage::new(Verb::ShowView, json!({ "name": "a" })));
        let snap = s.snapshot();
        for cloud in [snap.live_cloud.unwrap(), snap.shown_cloud.unwrap()] {
            assert!(cloud.points.len() <= budget);
            assert!(cloud.total_points > budget.min(1000));
        }
    }
}
