use carm_core::geometry::{pose_delta, RigidTransform, Vec3};
use carm_core::icp::{icp_align_indexed, nearest_linear, IcpParams, KdTree};
use carm_core::kinematics::{sample_surface, CArmDofs, CArmGeometry, DEFAULT_SURFACE_DENSITY};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

#[test]
fn random_perturbations_are_recovered() {
    let geom = CArmGeometry::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (k, preset) in ["neutral", "inlet", "caudal_oblique", "cranial_oblique_opposing"].iter().enumerate() {
        let saved = sample_surface(&CArmDofs::preset(preset).unwrap(), &geom, DEFAULT_SURFACE_DENSITY, k as u64).unwrap();
        assert!(saved.len() >= 5000);
        let index = KdTree::from_cloud(&saved);
        for _ in 0..10 {
            let t = RigidTransform::from_axis_angle_deg(unit(&mut rng), rng.random_range(0.0..=10.0))
                .with_translation(unit(&mut rng) * rng.random_range(0.0..=100.0));
            let live: Vec<Vec3> = saved.points().iter().map(|p| t.apply(p)).collect();
            let r = icp_align_indexed(&live, &index, &IcpParams::default()).unwrap();
            let d = pose_delta(&r.delta, &t.inverse());
            assert!(d.distance < 0.5 && d.angle < 0.05, "{preset}: {d:?}");
            assert!(r.converged && r.iterations <= 50);
            assert!(r.rms_history.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}

#[test]
fn kd_tree_matches_linear_scan_on_surface_cloud() {
    let cloud = sample_surface(&CArmDofs::neutral(), &CArmGeometry::default(), 400.0, 3).unwrap();
    let pts: Vec<Vec3> = cloud.points().iter().take(1000).copied().collect();
    let index = KdTree::new(pts.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for p in &pts {
        let q = p + unit(&mut rng) * rng.random_range(0.0..200.0);
        let oracle = nearest_linear(&pts, &q).unwrap();
        assert_eq!(index.nearest(&q).unwrap(), oracle);
        let within = index.nearest_within(&q, 50.0).unwrap();
        assert_eq!(within, (oracle.distance <= 50.0).then_some(oracle));
    }
}
