use std::fs;

use carm_core::depth::{render_depth, DepthImage, Scene};
use carm_core::kinematics::{surface_primitives, CArmDofs};
use carm_core::registry::ViewRegistry;
use carm_sim::config::{SimConfig, CONFIG_ENV};
use carm_sim::manifest::{self, ManifestError, MANIFEST_FILE};
use carm_sim::pgm::{read_depth, write_depth, DEPTH_UNIT_MM};
use carm_sim::session::{CommandMessage, Session, Verb};
use serde_json::json;

fn registry_with_views(names: &[&str]) -> ViewRegistry {
    let mut s = Session::new(SimConfig::default());
    for (i, name) in names.iter().enumerate() {
        s.handle_command(&CommandMessage::new(Verb::SetDofs, json!({ "orbital": 10.0 * i as f64 })));
        assert!(s.handle_command(&CommandMessage::new(Verb::SaveView, json!({ "name": name }))).reply.ok);
    }
    s.state().registry.clone()
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry_with_views(&["Position 1", "Position 2"]);
    let manifest = manifest::persist(&reg, dir.path()).unwrap();
    assert_eq!(manifest.views.len(), 2);
    let back = manifest::load(dir.path()).unwrap();
    assert_eq!(back.names(), reg.names());
    for (a, b) in reg.iter().zip(back.iter()) {
        assert_eq!(a.t0, b.t0);
        assert_eq!(a.tracker_pose, b.tracker_pose);
        assert_eq!(a.ir_extrinsic, b.ir_extrinsic);
        assert_eq!(a.reference_keypoints, b.reference_keypoints);
        assert_eq!(a.ground_truth_gantry, b.ground_truth_gantry);
        assert_eq!(a.cloud.frame(), b.cloud.frame());
        assert_eq!(a.cloud.len(), b.cloud.len());
        // Clouds are stored as float32.
        for (p, q) in a.cloud.points().iter().zip(b.cloud.points()) {
            assert!((p - q).norm() <= 1e-3 * (1.0 + p.norm() / 1000.0));
        }
    }
}

#[test]
fn repersist_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    manifest::persist(&registry_with_views(&["x", "y"]), a.path()).unwrap();
    let reloaded = manifest::load(a.path()).unwrap();
    manifest::persist(&reloaded, b.path()).unwrap();
    for file in [MANIFEST_FILE, "view_000.ply", "view_001.ply"] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
    }
    assert!(!a.path().join("manifest.tmp").exists());
}

#[test]
fn truncated_cloud_names_the_view() {
    let dir = tempfile::tempdir().unwrap();
    manifest::persist(&registry_with_views(&["inlet", "outlet"]), dir.path()).unwrap();
    let ply = dir.path().join("view_001.ply");
    let bytes = fs::read(&ply).unwrap();
    fs::write(&ply, &bytes[..bytes.len() - 7]).unwrap();
    let err = manifest::load(dir.path()).unwrap_err();
    assert!(matches!(err, ManifestError::Cloud { ref view, .. } if view == "outlet"), "{err}");
    assert!(err.to_string().contains("outlet"));
}

#[test]
fn missing_cloud_names_the_view() {
    let dir = tempfile::tempdir().unwrap();
    manifest::persist(&registry_with_views(&["inlet"]), dir.path()).unwrap();
    fs::remove_file(dir.path().join("view_000.ply")).unwrap();
    let err = manifest::load(dir.path()).unwrap_err();
    assert!(err.to_string().contains("inlet"), "{err}");
}

#[test]
fn depth_image_round_trip() {
    let cfg = SimConfig::default();
    let prims = surface_primitives(&CArmDofs::neutral(), &cfg.geometry).unwrap();
    let world_from_sensor = cfg.technician_pose.compose(&cfg.ir_extrinsic);
    let img = render_depth(Scene::Primitives(&prims), &world_from_sensor, &cfg.intrinsics, 0.0, 0, 12.5).unwrap();
    assert!(img.valid_count() > 1000);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frame.pgm");
    write_depth(&path, &img).unwrap();
    let back: DepthImage = read_depth(&path).unwrap();
    assert_eq!(back.intrinsics(), img.intrinsics());
    assert_eq!(back.timestamp(), 12.5);
    for (a, b) in img.depths().iter().zip(back.depths()) {
        assert!((a - b).abs() <= DEPTH_UNIT_MM / 2.0 + 1e-9, "{a} vs {b}");
    }
}

#[test]
fn config_file_and_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("a.json");
    fs::write(&file, r#"{"depth_noise_sigma": 2.0, "presets": {"lateral": {"base_x":0,"base_y":0,"column_height":0,"wheel_yaw":0,"orbital":90,"angular_tilt":0,"swivel":0}}}"#).unwrap();
    let other = dir.path().join("b.json");
    fs::write(&other, r#"{"seed": 9}"#).unwrap();

    std::env::remove_var(CONFIG_ENV);
    let cfg = SimConfig::resolve(Some(&file)).unwrap();
    assert_eq!(cfg.depth_noise_sigma, 2.0);
    assert_eq!(cfg.preset("lateral").unwrap().orbital, 90.0);
    assert_eq!(cfg.preset("inlet").unwrap().angular_tilt, -40.0);

    std::env::set_var(CONFIG_ENV, &other);
    let cfg = SimConfig::resolve(Some(&file)).unwrap();
    std::env::remove_var(CONFIG_ENV);
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.depth_noise_sigma, 0.0);

    let bad = dir.path().join("c.json");
    fs::write(&bad, r#"{"icp": {"max_iterations": 0}}"#).unwrap();
    assert!(SimConfig::load(&bad).is_err());
}
