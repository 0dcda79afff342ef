//! On-disk sequence layout:
//!
//! ```text
//! calib.txt          fx 0 cx 0 fy cy 0 0 1   tx ty tz qx qy qz qw
//! images/<t>.ppm     binary P6
//! scans/<t>.xyz      one "x y z" per line, LiDAR frame
//! ```
//!
//! `<t>` is the timestamp in seconds, written as fixed-point with six decimals.

use super::{project_to_depth, Frame, PointCloud, SensorError};
use crate::camera::CameraModel;
use crate::geometry::{PoseSE3, Vec3};
use crate::image::read_ppm;
use nalgebra::{Quaternion, UnitQuaternion};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const CALIB_FILE: &str = "calib.txt";
pub const IMAGES_DIR: &str = "images";
pub const SCANS_DIR: &str = "scans";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadConfig {
    /// Maximum image/scan timestamp gap for pairing, seconds.
    pub pairing_tolerance: f64,
}

impl Default for LoadConfig {
    fn default() -> Self {
        Self { pairing_tolerance: 0.05 }
    }
}

pub fn format_timestamp(t: f64) -> String {
    format!("{t:017.6}")
}

fn unreadable(path: &Path, reason: impl ToString) -> SensorError {
    SensorError::UnreadableFile { path: path.display().to_string(), reason: reason.to_string() }
}

/// Writes `calib.txt` for a camera (image size is implied by the images).
pub fn write_calibration(dir: &Path, cam: &CameraModel) -> Result<(), SensorError> {
    let e = &cam.lidar_to_camera;
    let q = e.rotation;
    let text = format!(
        "{} 0 {} 0 {} {} 0 0 1\n{} {} {} {} {} {} {}\n",
        cam.fx, cam.cx, cam.fy, cam.cy, e.translation.x, e.translation.y, e.translation.z, q.i, q.j, q.k, q.w
    );
    let path = dir.join(CALIB_FILE);
    std::fs::write(&path, text).map_err(|e| unreadable(&path, e))
}

/// Parses `calib.txt` into intrinsics and the LiDAR-to-camera extrinsic.
pub fn read_calibration(path: &Path) -> Result<([f64; 4], PoseSE3), SensorError> {
    let text = std::fs::read_to_string(path).map_err(|_| SensorError::MissingCalibration(path.display().to_string()))?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| unreadable(path, format!("bad number {t:?}"))))
        .collect::<Result<_, _>>()?;
    if values.len() != 16 {
        return Err(unreadable(path, format!("expected 16 numbers, found {}", values.len())));
    }
    let k = &values[..9];
    let intrinsics = [k[0], k[4], k[2], k[5]];
    let t = Vec3::new(values[9], values[10], values[11]);
    let q = Quaternion::new(values[15], values[12], values[13], values[14]);
    if q.norm() == 0.0 {
        return Err(unreadable(path, "zero quaternion"));
    }
    Ok((intrinsics, PoseSE3::new(UnitQuaternion::new_normalize(q), t)))
}

pub fn write_scan(path: &Path, cloud: &PointCloud) -> Result<(), SensorError> {
    let mut text = String::with_capacity(cloud.len() * 48);
    for p in &cloud.points {
        let _ = writeln!(text, "{} {} {}", p.x, p.y, p.z);
    }
    std::fs::write(path, text).map_err(|e| unreadable(path, e))
}

pub fn read_scan(path: &Path, timestamp: f64) -> Result<PointCloud, SensorError> {
    let text = std::fs::read_to_string(path).map_err(|e| unreadable(path, e))?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let coords: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| unreadable(path, format!("line {}: bad number", lineno + 1)))?;
        if coords.len() != 3 {
            return Err(unreadable(path, format!("line {}: expected 3 values", lineno + 1)));
        }
        points.push(Vec3::new(coords[0], coords[1], coords[2]));
    }
    Ok(PointCloud::new(points, timestamp))
}

fn list_stamped(dir: &Path, ext: &str) -> Result<Vec<(f64, PathBuf)>, SensorError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let entries = std::fs::read_dir(dir).map_err(|e| unreadable(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| unreadable(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        let Some(t) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<f64>().ok()) else {
            continue;
        };
        out.push((t, path));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

/// Lazily decodes frames from a dataset directory, in timestamp order.
#[derive(Debug)]
pub struct SequenceReader {
    camera: Option<CameraModel>,
    pairs: Vec<(f64, PathBuf, f64, PathBuf)>,
    next: usize,
    skipped: usize,
}

impl SequenceReader {
    /// `None` only for a directory with no images.
    pub fn camera(&self) -> Option<&CameraModel> {
        self.camera.as_ref()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Images and scans that found no partner within the tolerance.
    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

impl Iterator for SequenceReader {
    type Item = Result<Frame, SensorError>;

    fn next(&mut self) -> Option<Self::Item> {
        let (t_img, img_path, t_scan, scan_path) = self.pairs.get(self.next)?.clone();
        let index = self.next as u32;
        self.next += 1;
        let cam = self.camera.expect("camera is known whenever frames exist");
        Some((|| {
            let image = read_ppm(&img_path).map_err(|e| unreadable(&img_path, e))?;
            if image.width != cam.width || image.height != cam.height {
                return Err(unreadable(&img_path, "image size differs from the first image"));
            }
            let cloud = read_scan(&scan_path, t_scan)?;
            let depth = project_to_depth(&cloud, &cam);
            Ok(Frame { index, timestamp: t_img, image, cloud, depth, pose_guess: PoseSE3::identity() })
        })())
    }
}

/// Opens a dataset directory and pairs every image with the scan nearest in
/// time, if within `config.pairing_tolerance`.
pub fn load_sequence(dir: &Path, config: &LoadConfig) -> Result<SequenceReader, SensorError> {
    let images = list_stamped(&dir.join(IMAGES_DIR), "ppm")?;
    let scans = list_stamped(&dir.join(SCANS_DIR), "xyz")?;
    if images.is_empty() && scans.is_empty() {
        return Ok(SequenceReader { camera: None, pairs: Vec::new(), next: 0, skipped: 0 });
    }
    let calib_path = dir.join(CALIB_FILE);
    if !calib_path.exists() {
        return Err(SensorError::MissingCalibration(calib_path.display().to_string()));
    }
    let ([fx, fy, cx, cy], extrinsics) = read_calibration(&calib_path)?;

    let mut pairs = Vec::new();
    let mut used = vec![false; scans.len()];
    let mut skipped = 0;
    for (t_img, img_path) in &images {
        let nearest = scans
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 .0 - t_img).abs().total_cmp(&(b.1 .0 - t_img).abs()));
        match nearest {
            Some((j, (t_scan, scan_path))) if (t_scan - t_img).abs() <= config.pairing_tolerance => {
                used[j] = true;
                pairs.push((*t_img, img_path.clone(), *t_scan, scan_path.clone()));
            }
            _ => skipped += 1,
        }
    }
    skipped += used.iter().filter(|u| !**u).count();
    if skipped > 0 {
        log::warn!("{}: {skipped} unpaired images/scans skipped", dir.display());
    }

    let camera = match images.first() {
        Some((_, path)) => {
            let img = read_ppm(path).map_err(|e| unreadable(path, e))?;
            let cam = CameraModel::new(fx, fy, cx, cy, img.width, img.height)
                .map_err(|e| unreadable(&calib_path, e))?
                .with_extrinsics(extrinsics);
            Some(cam)
        }
        None => None,
    };
    Ok(SequenceReader { camera, pairs, next: 0, skipped })
}
