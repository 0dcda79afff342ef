//! Raw sensor data to frames: depth projection, normals, dataset I/O.

mod dataset;
mod depth;
mod normals;

pub use dataset::{
    format_timestamp, load_sequence, read_calibration, read_scan, write_calibration, write_scan, LoadConfig,
    SequenceReader, CALIB_FILE, IMAGES_DIR, SCANS_DIR,
};
pub use depth::project_to_depth;
pub use normals::{estimate_normals, NormalStats, DEFAULT_NORMAL_K};

use crate::geometry::{PoseSE3, Vec3};
use crate::image::{DepthImage, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SensorError {
    #[error("missing calibration file {0}")]
    MissingCalibration(String),
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: String, reason: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// One LiDAR sweep in the sensor frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Unit normals; `None` entries mark degenerate neighborhoods.
    pub normals: Option<Vec<Option<Vec3>>>,
    pub timestamp: f64,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, timestamp: f64) -> Self {
        Self { points, normals: None, timestamp }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of points carrying a valid normal.
    pub fn valid_normal_count(&self) -> usize {
        self.normals.as_ref().map_or(0, |n| n.iter().filter(|n| n.is_some()).count())
    }

    /// Points with valid normals as `(index, point, normal)`.
    pub fn oriented_points(&self) -> impl Iterator<Item = (usize, Vec3, Vec3)> + '_ {
        let normals = self.normals.as_deref().unwrap_or(&[]);
        normals.iter().enumerate().filter_map(|(i, n)| n.map(|n| (i, self.points[i], n)))
    }

    /// The cloud expressed in another frame.
    pub fn transformed(&self, pose: &PoseSE3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            normals: self.normals.as_ref().map(|ns| ns.iter().map(|n| n.map(|n| pose.rotate(&n))).collect()),
            timestamp: self.timestamp,
        }
    }
}

/// Time-aligned camera image and LiDAR sweep.
#[derive(Clone, Debug)]
pub struct Frame {
    pub index: u32,
    pub timestamp: f64,
    pub image: RgbImage,
    /// LiDAR points in the LiDAR frame.
    pub cloud: PointCloud,
    /// Metric camera-frame depth, 0 where there is no return.
    pub depth: DepthImage,
    pub pose_guess: PoseSE3,
}
