use super::GaussianMap;
use crate::camera::CameraModel;
use crate::gaussian::{basis_from_normal, rotation_from_matrix, GaussianPrimitive, Origin};
use crate::geometry::{Mat3, PoseSE3, Vec3};
use crate::sensor::Frame;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InsertParams {
    pub initial_opacity: f64,
    /// Scale multiplier along the viewing ray's footprint on the surface.
    pub ray_stretch: f64,
    /// Along-normal scale as a fraction of the pixel footprint.
    pub normal_flatten: f64,
}

impl Default for InsertParams {
    fn default() -> Self {
        Self { initial_opacity: 0.5, ray_stretch: 2.0, normal_flatten: 0.2 }
    }
}

/// Turns every LiDAR point of a keyframe that lands inside the image into a
/// reliable primitive and appends them to the map as one insertion event.
///
/// `pose` is the tracked camera-to-world pose. The primitive sits at the
/// world-frame point, takes the bilinearly sampled pixel color, and has
/// tangential scale `σ_t = z / fx` (one pixel footprint at depth z). Its
/// frame is built from the point's estimated normal: the normal axis gets
/// `normal_flatten · σ_t`, the in-surface direction of the camera ray gets
/// `ray_stretch · σ_t`, the remaining axis `σ_t`. Points without a valid
/// normal are skipped.
pub fn insert_keyframe_points(map: &mut GaussianMap, frame: &Frame, pose: &PoseSE3, cam: &CameraModel, params: &InsertParams) -> usize {
    let Some(normals) = frame.cloud.normals.as_ref() else {
        return 0;
    };
    let mut batch = Vec::with_capacity(frame.cloud.len());
    for (p, n) in frame.cloud.points.iter().zip(normals) {
        let Some(n) = n else { continue };
        let pc = cam.lidar_to_camera.transform_point(p);
        let Some((u, v)) = cam.project(&pc) else { continue };
        if cam.pixel_of(u, v).is_none() {
            continue;
        }
        let color = frame.image.sample_bilinear(u, v).map(|c| c.clamp(0.0, 1.0));
        let sigma_t = pc.z / cam.fx;
        let mut normal_cam = cam.lidar_to_camera.rotate(n);
        if normal_cam.dot(&pc) > 0.0 {
            normal_cam = -normal_cam;
        }
        let ray = pc.normalize();
        let basis = surface_basis(&normal_cam, &ray);
        let rotation_cam = rotation_from_matrix(&basis);
        let scales = Vec3::new(params.normal_flatten * sigma_t, params.ray_stretch * sigma_t, sigma_t);
        let mut g = GaussianPrimitive::new(pc, rotation_cam, scales, params.initial_opacity, color);
        g = g.transformed(pose);
        g.origin = Origin::Lidar;
        g.reliable = true;
        g.orient_normal_towards(&pose.translation);
        batch.push(g);
    }
    map.insert_batch(frame.index, batch)
}

/// Basis `(n, ray projected into the tangent plane, n × that)`.
fn surface_basis(normal: &Vec3, ray: &Vec3) -> Mat3 {
    let n = normal.normalize();
    let in_plane = ray - n * ray.dot(&n);
    match in_plane.try_normalize(1e-6) {
        Some(t1) => Mat3::from_columns(&[n, t1, n.cross(&t1)]),
        None => basis_from_normal(&n),
    }
}

/// Seeds color-only primitives on a pixel grid wherever no LiDAR return lies
/// within `stride / 2` pixels. Each seed is placed on its pixel ray at the
/// depth of the nearest LiDAR pixel and marked unreliable until a
/// conditional split anchors it. Seeds join the most recent insertion event.
pub fn seed_color_primitives(map: &mut GaussianMap, frame: &Frame, pose: &PoseSE3, cam: &CameraModel, stride: usize, opacity: f64) -> usize {
    if stride == 0 {
        return 0;
    }
    let depth = &frame.depth;
    let half = (stride / 2) as isize;
    let search = 2 * stride as isize;
    let mut batch = Vec::new();
    let mut row = stride / 2;
    while row < cam.height {
        let mut col = stride / 2;
        while col < cam.width {
            if nearest_depth(depth, col, row, half).is_none() {
                if let Some(z) = nearest_depth(depth, col, row, search) {
                    let pc = cam.backproject(col as f64, row as f64, z);
                    let sigma = z * stride as f64 / (2.0 * cam.fx);
                    let color = *frame.image.get(col, row);
                    let mut g = GaussianPrimitive::isotropic(pc, sigma, opacity, color.map(|c| c.clamp(0.0, 1.0)));
                    g = g.transformed(pose);
                    g.origin = Origin::Color;
                    g.reliable = false;
                    g.birth_frame = frame.index;
                    batch.push(g);
                }
            }
            col += stride;
        }
        row += stride;
    }
    let n = batch.len();
    map.push_untracked(batch);
    n
}

/// Depth of the closest (Chebyshev ring order) pixel with a return.
fn nearest_depth(depth: &crate::image::DepthImage, col: usize, row: usize, radius: isize) -> Option<f64> {
    for r in 0..=radius {
        let mut best: Option<f64> = None;
        for dy in -r..=r {
            for dx in -r..=r {
                if dx.abs() != r && dy.abs() != r {
                    continue;
                }
                let (c, w) = (col as isize + dx, row as isize + dy);
                if c < 0 || w < 0 || c >= depth.width as isize || w >= depth.height as isize {
                    continue;
                }
                let z = *depth.get(c as usize, w as usize);
                if z > 0.0 {
                    best = Some(best.map_or(z, |b: f64| b.min(z)));
                }
            }
        }
        if best.is_some() {
            return best;
        }
    }
    None
}
