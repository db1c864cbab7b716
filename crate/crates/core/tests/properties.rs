use approx::assert_relative_eq;
use carm_core::evaluation::{keypoint_displacement, pose_error_stats, KeypointSet};
use carm_core::geometry::{pose_delta, FrameId, FrameTransform, RigidTransform, TaggedPointCloud, Vec3};
use carm_core::registry::{save_view, show_view};
use proptest::prelude::*;

fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn transform() -> impl Strategy<Value = RigidTransform> {
    (vec3(1.0), 0.0..180.0f64, vec3(2000.0)).prop_filter_map("degenerate axis", |(axis, angle, t)| {
        (axis.norm() > 1e-3).then(|| RigidTransform::from_axis_angle_deg(axis, angle).with_translation(t))
    })
}

proptest! {
    #[test]
    fn compose_with_inverse_is_identity(t in transform()) {
        let (angle, dist) = t.compose(&t.inverse()).deviation_from_identity();
        prop_assert!(angle < 1e-9 && dist < 1e-9);
    }

    #[test]
    fn compose_is_associative(a in transform(), b in transform(), c in transform(), p in vec3(1000.0)) {
        let l = a.compose(&b).compose(&c).apply(&p);
        let r = a.compose(&b.compose(&c)).apply(&p);
        prop_assert!((l - r).norm() < 1e-9);
    }

    #[test]
    fn apply_matches_homogeneous_matrix(t in transform(), p in vec3(1000.0)) {
        let m = t.to_matrix();
        let h = [p.x, p.y, p.z, 1.0];
        let q = t.apply(&p);
        for i in 0..3 {
            let expected: f64 = (0..4).map(|j| m[i][j] * h[j]).sum();
            prop_assert!((q[i] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn pose_delta_is_symmetric_and_nonnegative(a in transform(), b in transform()) {
        let ab = pose_delta(&a, &b);
        let ba = pose_delta(&b, &a);
        prop_assert!(ab.distance >= 0.0 && ab.angle >= 0.0);
        prop_assert_eq!(ab.distance, ba.distance);
        prop_assert!((ab.angle - ba.angle).abs() < 1e-9);
        prop_assert_eq!(pose_delta(&a, &a).angle, 0.0);
    }

    #[test]
    fn pose_delta_angle_obeys_triangle_inequality(a in transform(), b in transform(), c in transform()) {
        let ac = pose_delta(&a, &c).angle;
        let ab = pose_delta(&a, &b).angle;
        let bc = pose_delta(&b, &c).angle;
        prop_assert!(ac <= ab + bc + 1e-9);
    }

    #[test]
    fn matrix_round_trip(t in transform()) {
        let back = RigidTransform::from_matrix(&t.to_matrix()).unwrap();
        let d = pose_delta(&t, &back);
        prop_assert!(d.distance < 1e-9 && d.angle < 1e-9);
    }

    #[test]
    fn frame_chain_checks_labels(t in transform(), p in vec3(500.0)) {
        let a = FrameTransform::new(FrameId::World, FrameId::Technician, t);
        let b = FrameTransform::new(FrameId::Technician, FrameId::IrSensor, t.inverse());
        let ab = a.then_from(&b).unwrap();
        prop_assert!((ab.transform.apply(&p) - p).norm() < 1e-9);
        prop_assert!(b.then_from(&a).is_err());
    }

    #[test]
    fn save_then_show_at_same_pose_is_identity(
        pose in transform(),
        ext in transform(),
        pts in prop::collection::vec(vec3(3000.0), 1..40),
    ) {
        let cloud = TaggedPointCloud::new(FrameId::IrSensor, pts.clone(), 0.0).unwrap();
        let view = save_view("v", &cloud, &pose, &ext, 0.0).unwrap();
        let shown = show_view(&view, &pose).unwrap();
        // Technician-frame view: expected ext · p.
        for (s, p) in shown.points().iter().zip(&pts) {
            prop_assert!((s - ext.apply(p)).norm() < 1e-8);
        }
    }

    #[test]
    fn uniform_shift_gives_exact_displacement(
        coords in prop::collection::vec((0i32..1024, 0i32..1024), 1..20),
        du in -50i32..50,
        dv in -50i32..50,
    ) {
        let mut a = KeypointSet::new();
        for (i, (u, v)) in coords.iter().enumerate() {
            a.insert(format!("k{i}"), *u as f64, *v as f64);
        }
        let b = a.shifted(du as f64, dv as f64);
        let expected = ((du * du + dv * dv) as f64).sqrt();
        prop_assert_eq!(keypoint_displacement(&a, &b).unwrap(), expected);
    }

    #[test]
    fn repeated_pairs_have_zero_sd(t in transform(), n in 1usize..30) {
        let s = pose_error_stats(&vec![(t, RigidTransform::identity()); n]).unwrap();
        prop_assert_eq!(s.distance.sd, 0.0);
        prop_assert_eq!(s.angle.sd, 0.0);
        assert_relative_eq!(s.distance.mean, t.translation().norm(), max_relative = 1e-12);
    }
}
