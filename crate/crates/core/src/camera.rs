use crate::geometry::{PoseSE3, Vec3};
use thiserror::Error;

/// LiDAR (x forward, y left, z up) mounted `height` above a camera
/// (x right, y down, z forward), returned as the LiDAR-to-camera transform.
pub fn forward_lidar_extrinsics(height: f64) -> PoseSE3 {
    let r = crate::geometry::Mat3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    PoseSE3::from_matrix_parts(&r, Vec3::new(0.0, -height, 0.0))
}

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("focal lengths must be positive (fx = {fx}, fy = {fy})")]
    BadFocal { fx: f64, fy: f64 },
    #[error("image size must be positive ({width}x{height})")]
    BadSize { width: usize, height: usize },
}

/// Pinhole camera with a LiDAR-to-camera extrinsic.
///
/// Pixel centers sit at integer coordinates: pixel `(col, row)` covers
/// `[col - 0.5, col + 0.5) × [row - 0.5, row + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Maps LiDAR coordinates into camera coordinates.
    pub lidar_to_camera: PoseSE3,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, CameraError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(CameraError::BadFocal { fx, fy });
        }
        if width == 0 || height == 0 {
            return Err(CameraError::BadSize { width, height });
        }
        Ok(Self { fx, fy, cx, cy, width, height, lidar_to_camera: PoseSE3::identity() })
    }

    pub fn with_extrinsics(mut self, lidar_to_camera: PoseSE3) -> Self {
        self.lidar_to_camera = lidar_to_camera;
        self
    }

    /// Camera with principal point at the image center.
    pub fn centered(f: f64, width: usize, height: usize) -> Result<Self, CameraError> {
        Self::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Perspective projection of a camera-frame point. `None` behind the camera.
    #[inline]
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Pixel containing image coordinate `(u, v)`, if inside the image.
    #[inline]
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let col = (u + 0.5).floor();
        let row = (v + 0.5).floor();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some((col as usize, row as usize))
    }

    /// Camera-frame point at metric depth `z` on the ray through `(u, v)`.
    #[inline]
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Whether a camera-frame point lands inside the image with positive depth.
    pub fn sees(&self, p: &Vec3) -> bool {
        self.project(p).and_then(|(u, v)| self.pixel_of(u, v)).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(CameraModel::new(0.0, 1.0, 0.0, 0.0, 10, 10), Err(CameraError::BadFocal { .. })));
        assert!(matches!(CameraModel::new(1.0, 1.0, 0.0, 0.0, 0, 10), Err(CameraError::BadSize { .. })));
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam = CameraModel::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let (u, v) = cam.project(&Vec3::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!(cam.pixel_of(u, v), Some((50, 50)));
        assert!(cam.project(&Vec3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn backprojection_inverts_projection() {
        let cam = CameraModel::new(120.0, 110.0, 80.0, 60.0, 160, 120).unwrap();
        let p = Vec3::new(0.4, -0.3, 2.5);
        let (u, v) = cam.project(&p).unwrap();
        assert!((cam.backproject(u, v, p.z) - p).norm() < 1e-12);
    }
}
