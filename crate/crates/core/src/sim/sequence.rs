use super::{simulate_camera, simulate_lidar, LidarPattern, SceneSpec};
use crate::camera::CameraModel;
#[cfg(test)]
use crate::camera::forward_lidar_extrinsics;
use crate::geometry::{PoseSE3, Vec3};
use crate::image::write_ppm;
use crate::sensor::{format_timestamp, write_calibration, write_scan, PointCloud, SensorError, IMAGES_DIR, SCANS_DIR};
use crate::trajectory::{write_tum, Stamped};
use std::f64::consts::PI;
use std::path::Path;

pub const GT_TRAJECTORY_FILE: &str = "gt_trajectory.txt";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PathShape {
    /// Straight segment from `start` with a heading in degrees from +x.
    Line { start: Vec3, heading_deg: f64, length: f64 },
    /// Circular arc around `center` (at the path height), counter-clockwise
    /// for positive sweep.
    Arc { center: Vec3, radius: f64, start_deg: f64, sweep_deg: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpeedProfile {
    Constant,
    /// Cosine ease-in/ease-out.
    Smooth,
}

/// Camera path. Headings stay horizontal with world z up; a sinusoidal
/// yaw wiggle of `yaw_amp_deg` and period `yaw_period` frames is added on
/// top of the path direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectorySpec {
    pub shape: PathShape,
    pub frames: usize,
    pub dt: f64,
    pub profile: SpeedProfile,
    pub yaw_amp_deg: f64,
    pub yaw_period: f64,
}

impl TrajectorySpec {
    /// Camera-to-world poses, timestamps starting at 0.
    pub fn poses(&self) -> Vec<Stamped> {
        let n = self.frames.max(2);
        (0..n)
            .map(|k| {
                let lin = k as f64 / (n - 1) as f64;
                let s = match self.profile {
                    SpeedProfile::Constant => lin,
                    SpeedProfile::Smooth => 0.5 - 0.5 * (PI * lin).cos(),
                };
                let (pos, heading) = match self.shape {
                    PathShape::Line { start, heading_deg, length } => {
                        let h = heading_deg.to_radians();
                        (start + s * length * Vec3::new(h.cos(), h.sin(), 0.0), h)
                    }
                    PathShape::Arc { center, radius, start_deg, sweep_deg } => {
                        let a = (start_deg + s * sweep_deg).to_radians();
                        let pos = center + radius * Vec3::new(a.cos(), a.sin(), 0.0);
                        (pos, a + sweep_deg.signum() * PI / 2.0)
                    }
                };
                let wiggle = if self.yaw_period > 0.0 { (2.0 * PI * k as f64 / self.yaw_period).sin() } else { 0.0 };
                let yaw = heading + self.yaw_amp_deg.to_radians() * wiggle;
                let forward = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
                Stamped { timestamp: k as f64 * self.dt, pose: PoseSE3::look_at(pos, pos + forward, Vec3::z()) }
            })
            .collect()
    }
}

/// Writes a dataset directory readable by `load_sequence` plus the
/// ground-truth camera trajectory. Scans are stored without their normals.
/// Returns the number of frames written.
pub fn generate_sequence(
    scene: &SceneSpec,
    traj: &TrajectorySpec,
    cam: &CameraModel,
    pattern: &LidarPattern,
    out_dir: &Path,
) -> Result<usize, SensorError> {
    let io = |path: &Path, e: &dyn std::fmt::Display| SensorError::UnreadableFile { path: path.display().to_string(), reason: e.to_string() };
    for sub in [IMAGES_DIR, SCANS_DIR] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| io(&d, &e))?;
    }
    write_calibration(out_dir, cam)?;
    let poses = traj.poses();
    for (k, st) in poses.iter().enumerate() {
        let name = format_timestamp(st.timestamp);
        let img = simulate_camera(scene, &st.pose, cam);
        let img_path = out_dir.join(IMAGES_DIR).join(format!("{name}.ppm"));
        write_ppm(&img_path, &img).map_err(|e| io(&img_path, &e))?;
        let lidar_pose = st.pose.compose(&cam.lidar_to_camera);
        let cloud = simulate_lidar(scene, &lidar_pose, pattern, k as u32, st.timestamp);
        let scan_path = out_dir.join(SCANS_DIR).join(format!("{name}.xyz"));
        write_scan(&scan_path, &PointCloud::new(cloud.points, st.timestamp))?;
    }
    let gt = out_dir.join(GT_TRAJECTORY_FILE);
    write_tum(&gt, &poses).map_err(|e| io(&gt, &e))?;
    Ok(poses.len())
}
