//! On-disk view registry: `manifest.json` plus one PLY file per view.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use carm_core::evaluation::KeypointSet;
use carm_core::geometry::{FrameId, GeometryError, TaggedPointCloud};
use carm_core::registry::{SavedView, ViewRegistry};
use serde::{Deserialize, Serialize};

use crate::ply::{read_ply, write_ply, PlyError};
use crate::pose::PoseRecord;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("unsupported manifest version {0}")]
    Version(u32),
    #[error("view {view:?}: {source}")]
    Cloud { view: String, source: PlyError },
    #[error("view {view:?}: manifest lists {expected} points, cloud file has {found}")]
    PointCount { view: String, expected: usize, found: usize },
    #[error("view {view:?}: {reason}")]
    Pose { view: String, reason: String },
    #[error("view {view:?}: {source}")]
    Geometry { view: String, source: GeometryError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub t0: f64,
    pub world_from_sensor: [[f64; 4]; 4],
    pub tracker_pose: PoseRecord,
    pub ir_extrinsic: PoseRecord,
    pub cloud_file: String,
    pub point_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_keypoints: Option<KeypointSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_gantry: Option<PoseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub views: Vec<ManifestEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `path` through a temporary sibling and a rename.
fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<(), ManifestError>) -> Result<(), ManifestError> {
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    write(&mut w)?;
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Writes every view of `registry` into `dir` (created if missing).
pub fn persist(registry: &ViewRegistry, dir: &Path) -> Result<Manifest, ManifestError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut views = Vec::with_capacity(registry.len());
    for (i, view) in registry.iter().enumerate() {
        let cloud_file = format!("view_{i:03}.ply");
        let path = dir.join(&cloud_file);
        write_atomic(&path, |w| {
            write_ply(w, view.cloud.frame(), view.cloud.points()).map_err(|source| ManifestError::Cloud {
                view: view.name.clone(),
                source,
            })
        })?;
        views.push(ManifestEntry {
            name: view.name.clone(),
            t0: view.t0,
            world_from_sensor: view.world_from_sensor().to_matrix(),
            tracker_pose: (&view.tracker_pose).into(),
            ir_extrinsic: (&view.ir_extrinsic).into(),
            cloud_file,
            point_count: view.cloud.len(),
            reference_keypoints: view.reference_keypoints.clone(),
            ground_truth_gantry: view.ground_truth_gantry.as_ref().map(Into::into),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        views,
    };
    let path = dir.join(MANIFEST_FILE);
    write_atomic(&path, |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest).map_err(|source| ManifestError::Parse {
            path: path.clone(),
            source,
        })?;
        w.write_all(b"\n").map_err(io_err(&path))
    })?;
    Ok(manifest)
}

/// Reads a registry written by [`persist`].
pub fn load(dir: &Path) -> Result<ViewRegistry, ManifestError> {
    let path = dir.join(MANIFEST_FILE);
    let file = File::open(&path).map_err(io_err(&path))?;
    let manifest: Manifest =
        serde_json::from_reader(BufReader::new(file)).map_err(|source| ManifestError::Parse { path: path.clone(), source })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(ManifestError::Version(manifest.version));
    }
    let mut registry = ViewRegistry::new();
    for entry in manifest.views {
        registry.insert(load_entry(dir, entry)?);
    }
    Ok(registry)
}

fn load_entry(dir: &Path, entry: ManifestEntry) -> Result<SavedView, ManifestError> {
    let view = entry.name.clone();
    let pose_err = |reason: String| ManifestError::Pose { view: view.clone(), reason };
    let tracker_pose = entry.tracker_pose.to_transform().map_err(pose_err)?;
    let ir_extrinsic = entry.ir_extrinsic.to_transform().map_err(pose_err)?;
    let ground_truth_gantry = entry
        .ground_truth_gantry
        .as_ref()
        .map(PoseRecord::to_transform)
        .transpose()
        .map_err(pose_err)?;

    let path = dir.join(&entry.cloud_file);
    let file = File::open(&path).map_err(|source| ManifestError::Cloud {
        view: view.clone(),
        source: PlyError::Io(source),
    })?;
    let (frame, points) = read_ply(BufReader::new(file)).map_err(|source| ManifestError::Cloud { view: view.clone(), source })?;
    if points.len() != entry.point_count {
        return Err(ManifestError::PointCount {
            view,
            expected: entry.point_count,
            found: points.len(),
        });
    }
    let frame = frame.unwrap_or(FrameId::World);
    let cloud = TaggedPointCloud::new(frame, points, entry.t0)
        .and_then(|c| c.ensure_frame(FrameId::World).map(|_| c))
        .map_err(|source| ManifestError::Geometry { view: view.clone(), source })?;
    Ok(SavedView {
        name: entry.name,
        t0: entry.t0,
        cloud,
        tracker_pose,
        ir_extrinsic,
        reference_keypoints: entry.reference_keypoints,
        ground_truth_gantry,
    })
}
