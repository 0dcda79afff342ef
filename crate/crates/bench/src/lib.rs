//! Shared fixtures for the benchmarks: the first frames of the bundled
//! corridor and the map built from its first keyframe.

use splatslam::backend::{Backend, BackendParams};
use splatslam::camera::CameraModel;
use splatslam::sensor::{estimate_normals, load_sequence, Frame, LoadConfig};
use splatslam::sim::{generate_sequence, SimulationSpec, PLANE_CORRIDOR};
use splatslam::Vec3;

pub struct Fixture {
    pub cam: CameraModel,
    pub frames: Vec<Frame>,
    pub backend: Backend,
}

/// Simulates `n` corridor frames and inserts the first as a keyframe.
pub fn corridor(n: usize) -> Fixture {
    let mut spec = SimulationSpec::parse(PLANE_CORRIDOR).expect("bundled scene parses");
    spec.trajectory.frames = spec.trajectory.frames.min(n.max(2));
    let dir = tempfile::tempdir().expect("temp dir");
    generate_sequence(&spec.scene, &spec.trajectory, &spec.camera, &spec.lidar, dir.path()).expect("simulation");
    let reader = load_sequence(dir.path(), &LoadConfig::default()).expect("dataset loads");
    let cam = *reader.camera().expect("frames exist");
    let frames: Vec<Frame> = reader
        .map(|f| {
            let mut f = f.expect("frame decodes");
            f.cloud = estimate_normals(&f.cloud, 10, &Vec3::zeros()).expect("normals").0;
            f
        })
        .collect();
    let mut backend = Backend::new(cam, BackendParams::default());
    backend.insert(frames[0].clone(), splatslam::PoseSE3::identity());
    Fixture { cam, frames, backend }
}
