use super::PointCloud;
use crate::camera::CameraModel;
use crate::image::{DepthImage, Grid};

/// Projects LiDAR points into a metric depth image: each point is moved
/// into the camera frame by the extrinsic, projected with the intrinsics,
/// and the nearest return wins per pixel. Pixels without returns stay 0.
pub fn project_to_depth(cloud: &PointCloud, cam: &CameraModel) -> DepthImage {
    let mut depth = Grid::filled(cam.width, cam.height, 0.0);
    for p in &cloud.points {
        let pc = cam.lidar_to_camera.transform_point(p);
        let Some((u, v)) = cam.project(&pc) else { continue };
        let Some((col, row)) = cam.pixel_of(u, v) else { continue };
        let d = depth.get_mut(col, row);
        if *d == 0.0 || pc.z < *d {
            *d = pc.z;
        }
    }
    depth
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PoseSE3, Vec3};
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraModel {
        CameraModel::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn optical_axis_point() {
        let cloud = PointCloud::new(vec![Vec3::new(0.0, 0.0, 5.0)], 0.0);
        let d = project_to_depth(&cloud, &cam());
        assert_eq!(*d.get(50, 50), 5.0);
        assert_eq!(d.data.iter().filter(|&&v| v > 0.0).count(), 1);
    }

    #[test]
    fn z_buffer_keeps_nearest() {
        let cloud = PointCloud::new(vec![Vec3::new(0.0, 0.0, 7.0), Vec3::new(0.0, 0.0, 3.0)], 0.0);
        assert_eq!(*project_to_depth(&cloud, &cam()).get(50, 50), 3.0);
    }

    #[test]
    fn behind_and_outside_are_dropped() {
        let cloud = PointCloud::new(vec![Vec3::new(0.0, 0.0, -2.0), Vec3::new(100.0, 0.0, 1.0)], 0.0);
        assert!(project_to_depth(&cloud, &cam()).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn back_projection_reproduces_input_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let extr = PoseSE3::new(UnitQuaternion::from_scaled_axis(Vec3::new(0.05, -0.1, 0.02)), Vec3::new(0.1, 0.0, -0.05));
        let cam = cam().with_extrinsics(extr);
        let points: Vec<Vec3> = (0..400)
            .map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(1.0..8.0)))
            .collect();
        let cloud = PointCloud::new(points.clone(), 0.0);
        let depth = project_to_depth(&cloud, &cam);
        let cam_pts: Vec<Vec3> = points.iter().map(|p| extr.transform_point(p)).collect();
        for row in 0..cam.height {
            for col in 0..cam.width {
                let z = *depth.get(col, row);
                if z == 0.0 {
                    continue;
                }
                let ray_pt = cam.backproject(col as f64, row as f64, z);
                // some input point at this depth reprojects within one pixel of the ray point
                let ok = cam_pts.iter().any(|p| {
                    let (u, v) = cam.project(p).unwrap();
                    (p.z - z).abs() < 1e-12 && (u - col as f64).abs() <= 1.0 && (v - row as f64).abs() <= 1.0
                });
                assert!(ok, "no source point for pixel ({col},{row}) at {ray_pt:?}");
            }
        }
    }
}
