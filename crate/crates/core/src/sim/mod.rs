//! Ground-truth scenes, sensors and trajectories for synthetic datasets.

mod sequence;
mod spec;

pub use crate::camera::forward_lidar_extrinsics;
pub use sequence::{generate_sequence, PathShape, SpeedProfile, TrajectorySpec, GT_TRAJECTORY_FILE};
pub use spec::{parse_scene_file, SimulationSpec, SpecError};

/// The bundled corridor scene description.
pub const PLANE_CORRIDOR: &str = include_str!("../../scenes/plane-corridor.scene");

use crate::camera::CameraModel;
use crate::gaussian::GaussianPrimitive;
use crate::geometry::{PoseSE3, Vec3};
use crate::image::{Grid, RgbImage};
use crate::map::SKY_COLOR;
use crate::sensor::PointCloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Texture {
    Solid,
    /// Smooth sinusoidal modulation with the given spatial frequency (rad/m).
    Waves(f64),
    /// Alternates with `alt` in cubes of the given edge length.
    Checker { size: f64, alt: Vec3 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Material {
    pub color: Vec3,
    pub texture: Texture,
}

impl Material {
    pub fn solid(color: Vec3) -> Self {
        Self { color, texture: Texture::Solid }
    }

    pub fn shade(&self, p: &Vec3) -> Vec3 {
        match self.texture {
            Texture::Solid => self.color,
            Texture::Waves(f) => {
                let t = (f * p.x).sin() * (0.7 * f * p.y).cos() + (1.3 * f * p.z).sin() * (0.9 * f * (p.x + p.y)).cos();
                (self.color * (0.7 + 0.15 * t)).map(|c| c.clamp(0.0, 1.0))
            }
            Texture::Checker { size, alt } => {
                let k = (p / size).map(|c| c.floor() as i64);
                if (k.x + k.y + k.z).rem_euclid(2) == 0 {
                    self.color
                } else {
                    alt
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Rectangle through `center` spanned by unit `u` and `v`, half sizes
    /// `half.0` along u and `half.1` along v. Infinite half sizes give a plane.
    Plane { center: Vec3, u: Vec3, v: Vec3, half: (f64, f64) },
    /// Axis-aligned box.
    Cuboid { min: Vec3, max: Vec3 },
    Sphere { center: Vec3, radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub material: Material,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    /// Unit surface normal facing the ray origin.
    pub normal: Vec3,
    pub color: Vec3,
}

impl Shape {
    /// Nearest intersection with `t > t_min` along a unit direction.
    pub fn intersect(&self, o: &Vec3, d: &Vec3, t_min: f64) -> Option<(f64, Vec3)> {
        match *self {
            Shape::Plane { center, u, v, half } => {
                let n = u.cross(&v);
                let denom = n.dot(d);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = n.dot(&(center - o)) / denom;
                if t <= t_min {
                    return None;
                }
                let rel = o + t * d - center;
                if rel.dot(&u).abs() > half.0 || rel.dot(&v).abs() > half.1 {
                    return None;
                }
                Some((t, if denom < 0.0 { n } else { -n }))
            }
            Shape::Cuboid { min, max } => {
                // slab test, keeping the axis that bounds each end
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut ax0, mut ax1) = (0, 0);
                for k in 0..3 {
                    if d[k].abs() < 1e-300 {
                        if o[k] < min[k] || o[k] > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = ((min[k] - o[k]) / d[k], (max[k] - o[k]) / d[k]);
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                    }
                    if a > t0 {
                        t0 = a;
                        ax0 = k;
                    }
                    if b < t1 {
                        t1 = b;
                        ax1 = k;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, axis) = if t0 > t_min {
                    (t0, ax0)
                } else if t1 > t_min {
                    (t1, ax1)
                } else {
                    return None;
                };
                let mut n = Vec3::zeros();
                n[axis] = -d[axis].signum();
                Some((t, n))
            }
            Shape::Sphere { center, radius } => {
                let oc = o - center;
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > t_min {
                    -b - s
                } else if -b + s > t_min {
                    -b + s
                } else {
                    return None;
                };
                let mut n = (o + t * d - center) / radius;
                if n.dot(d) > 0.0 {
                    n = -n;
                }
                Some((t, n))
            }
        }
    }
}

/// Parametric surfaces and/or Gaussian primitives in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    /// When non-empty, camera images come from the Gaussian renderer.
    pub gaussians: Vec<GaussianPrimitive>,
    pub extent: f64,
    pub seed: u64,
    pub background: Vec3,
}

impl SceneSpec {
    pub fn new(objects: Vec<SceneObject>, extent: f64, seed: u64) -> Self {
        Self { objects, gaussians: Vec::new(), extent, seed, background: Vec3::from(SKY_COLOR) }
    }

    pub fn from_gaussians(gaussians: Vec<GaussianPrimitive>, extent: f64, seed: u64) -> Self {
        Self { objects: Vec::new(), gaussians, extent, seed, background: Vec3::from(SKY_COLOR) }
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty() && self.gaussians.is_empty()
    }

    /// First surface hit along a unit ray.
    pub fn cast(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        let mut best: Option<(f64, Vec3, &SceneObject)> = None;
        for obj in &self.objects {
            if let Some((t, n)) = obj.shape.intersect(o, d, 1e-9) {
                if best.is_none_or(|(bt, _, _)| t < bt) {
                    best = Some((t, n, obj));
                }
            }
        }
        best.map(|(t, normal, obj)| {
            let point = o + t * d;
            Hit { t, point, normal, color: obj.material.shade(&point) }
        })
    }
}

/// Livox-like sparse scan: a low-discrepancy angular pattern, shifted per
/// frame by a seeded random offset so that successive scans do not repeat.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPattern {
    pub rays: usize,
    pub h_fov_deg: f64,
    pub v_fov_deg: f64,
    pub max_range: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for LidarPattern {
    fn default() -> Self {
        Self { rays: 2000, h_fov_deg: 81.0, v_fov_deg: 25.0, max_range: 100.0, noise_sigma: 0.0, seed: 0 }
    }
}

impl LidarPattern {
    /// Unit ray directions in the LiDAR frame (x forward, y left, z up) for
    /// scan number `frame`.
    pub fn directions(&self, frame: u32) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (u64::from(frame) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (s0, s1): (f64, f64) = (rng.random(), rng.random());
        // additive recurrence on the plastic number
        let g = 1.324_717_957_244_746;
        let (a1, a2) = (1.0 / g, 1.0 / (g * g));
        let (hh, hv) = (self.h_fov_deg.to_radians() / 2.0, self.v_fov_deg.to_radians() / 2.0);
        (0..self.rays)
            .map(|k| {
                let u = (s0 + a1 * k as f64).fract();
                let v = (s1 + a2 * k as f64).fract();
                let az = (2.0 * u - 1.0) * hh;
                // uniform in sin(elevation) spreads rays evenly over the band
                let el = ((2.0 * v - 1.0) * hv.sin()).asin();
                Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
            })
            .collect()
    }
}

/// Casts the pattern from a LiDAR at `lidar_pose` (sensor-to-world). Returns
/// sensor-frame points with ground-truth normals attached; rays that miss or
/// exceed the range are dropped. Range noise is Gaussian along the ray.
pub fn simulate_lidar(scene: &SceneSpec, lidar_pose: &PoseSE3, pattern: &LidarPattern, frame: u32, timestamp: f64) -> PointCloud {
    let dirs = pattern.directions(frame);
    let origin = lidar_pose.translation;
    let hits: Vec<Option<(f64, Vec3, Vec3)>> = dirs
        .par_iter()
        .map(|d| {
            let dw = lidar_pose.rotate(d);
            scene.cast(&origin, &dw).filter(|h| h.t <= pattern.max_range).map(|h| (h.t, *d, h.normal))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(pattern.seed.wrapping_add(0x5EED).wrapping_mul(u64::from(frame) + 7));
    let noise = Normal::new(0.0, pattern.noise_sigma.max(0.0)).expect("finite sigma");
    let inv = lidar_pose.inverse();
    let mut points = Vec::with_capacity(hits.len());
    let mut normals = Vec::with_capacity(hits.len());
    for (t, d, n) in hits.into_iter().flatten() {
        let r = if pattern.noise_sigma > 0.0 { t + noise.sample(&mut rng) } else { t };
        points.push(d * r);
        normals.push(Some(inv.rotate(&n)));
    }
    PointCloud { points, normals: Some(normals), timestamp }
}

/// Image seen by `cam` at camera-to-world `pose`. Gaussian scenes go
/// through the splatting renderer; surface scenes are ray cast through
/// pixel centers with unshaded albedo and the background color for misses.
pub fn simulate_camera(scene: &SceneSpec, pose: &PoseSE3, cam: &CameraModel) -> RgbImage {
    if !scene.gaussians.is_empty() {
        return crate::renderer::render(&scene.gaussians, pose, cam).color;
    }
    let data: Vec<Vec3> = (0..cam.pixel_count())
        .into_par_iter()
        .map(|i| {
            let (col, row) = (i % cam.width, i / cam.width);
            let dc = cam.backproject(col as f64, row as f64, 1.0).normalize();
            let d = pose.rotate(&dc);
            scene.cast(&pose.translation, &d).map_or(scene.background, |h| h.color)
        })
        .collect();
    Grid { width: cam.width, height: cam.height, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    fn floor() -> SceneSpec {
        let plane = Shape::Plane { center: Vec3::zeros(), u: Vec3::x(), v: Vec3::y(), half: (f64::INFINITY, f64::INFINITY) };
        SceneSpec::new(vec![SceneObject { shape: plane, material: Material::solid(Vec3::new(1.0, 0.0, 0.0)) }], 10.0, 1)
    }

    #[test]
    fn downward_rays_land_on_the_floor() {
        let scene = floor();
        // LiDAR 2 m up, pitched down so the whole band hits the floor
        let pose = PoseSE3::new(UnitQuaternion::from_euler_angles(0.0, 1.2, 0.0), Vec3::new(0.0, 0.0, 2.0));
        let cloud = simulate_lidar(&scene, &pose, &LidarPattern::default(), 0, 0.0);
        assert_eq!(cloud.len(), 2000);
        for p in &cloud.points {
            assert!(pose.transform_point(p).z.abs() < 1e-9);
        }
    }

    #[test]
    fn sphere_ranges_match_closed_form() {
        let c = Vec3::new(5.0, 0.3, -0.2);
        let scene = SceneSpec::new(
            vec![SceneObject { shape: Shape::Sphere { center: c, radius: 2.0 }, material: Material::solid(Vec3::repeat(0.5)) }],
            10.0,
            1,
        );
        let cloud = simulate_lidar(&scene, &PoseSE3::identity(), &LidarPattern::default(), 3, 0.0);
        assert!(cloud.len() > 100);
        for p in &cloud.points {
            let d = p.normalize();
            let b = d.dot(&c);
            let t = b - (b * b - c.norm_squared() + 4.0).sqrt();
            assert!((p.norm() - t).abs() < 1e-9);
            assert!(((p - c).norm() - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn range_noise_has_the_requested_spread() {
        let wall = Shape::Plane { center: Vec3::new(10.0, 0.0, 0.0), u: Vec3::y(), v: Vec3::z(), half: (f64::INFINITY, f64::INFINITY) };
        let scene = SceneSpec::new(vec![SceneObject { shape: wall, material: Material::solid(Vec3::repeat(0.5)) }], 10.0, 1);
        let pattern = LidarPattern { rays: 10_000, noise_sigma: 0.01, ..LidarPattern::default() };
        let clean = simulate_lidar(&scene, &PoseSE3::identity(), &LidarPattern { noise_sigma: 0.0, ..pattern }, 0, 0.0);
        let noisy = simulate_lidar(&scene, &PoseSE3::identity(), &pattern, 0, 0.0);
        let errs: Vec<f64> = noisy.points.iter().zip(&clean.points).map(|(a, b)| a.norm() - b.norm()).collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let std = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / errs.len() as f64).sqrt();
        assert!((std - 0.01).abs() < 0.0015, "{std}");
    }

    #[test]
    fn moving_scene_and_sensor_together_leaves_scan_unchanged() {
        let scene = SceneSpec::new(
            vec![
                SceneObject {
                    shape: Shape::Cuboid { min: Vec3::new(3.0, -1.0, -1.0), max: Vec3::new(4.0, 1.0, 0.5) },
                    material: Material::solid(Vec3::repeat(0.5)),
                },
                SceneObject { shape: Shape::Sphere { center: Vec3::new(6.0, 2.0, 0.0), radius: 1.5 }, material: Material::solid(Vec3::repeat(0.2)) },
            ],
            10.0,
            1,
        );
        let shift = Vec3::new(1.5, -2.0, 0.7);
        let mut moved = scene.clone();
        for o in &mut moved.objects {
            o.shape = match o.shape {
                Shape::Cuboid { min, max } => Shape::Cuboid { min: min + shift, max: max + shift },
                Shape::Sphere { center, radius } => Shape::Sphere { center: center + shift, radius },
                s => s,
            };
        }
        let pose = PoseSE3::from_translation(Vec3::new(0.0, 0.1, 0.2));
        let a = simulate_lidar(&scene, &pose, &LidarPattern::default(), 5, 0.0);
        let b = simulate_lidar(&moved, &PoseSE3::from_translation(pose.translation + shift), &LidarPattern::default(), 5, 0.0);
        assert_eq!(a.len(), b.len());
        for (p, q) in a.points.iter().zip(&b.points) {
            assert!((p - q).norm() < 1e-9);
        }
    }

    #[test]
    fn empty_frustum_is_background() {
        let scene = floor();
        let cam = CameraModel::centered(50.0, 20, 10).unwrap();
        // looking straight up
        let pose = PoseSE3::look_at(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 5.0), Vec3::x());
        let img = simulate_camera(&scene, &pose, &cam);
        assert!(img.data.iter().all(|c| *c == Vec3::from(SKY_COLOR)));
    }

    #[test]
    fn red_floor_fills_a_downward_view() {
        let scene = floor();
        let cam = CameraModel::centered(50.0, 20, 10).unwrap();
        let pose = PoseSE3::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::x());
        let img = simulate_camera(&scene, &pose, &cam);
        assert!(img.data.iter().all(|c| (c - Vec3::new(1.0, 0.0, 0.0)).amax() <= 0.02));
    }

    #[test]
    fn gaussian_scene_uses_the_renderer() {
        let g = GaussianPrimitive::isotropic(Vec3::new(0.0, 0.0, 3.0), 0.3, 0.8, Vec3::new(0.2, 0.7, 0.1));
        let scene = SceneSpec::from_gaussians(vec![g.clone()], 5.0, 0);
        let cam = CameraModel::centered(40.0, 24, 24).unwrap();
        let img = simulate_camera(&scene, &PoseSE3::identity(), &cam);
        assert_eq!(img, crate::renderer::render(&[g], &PoseSE3::identity(), &cam).color);
    }

    #[test]
    fn patterns_differ_between_frames_but_not_between_runs() {
        let p = LidarPattern::default();
        assert_eq!(p.directions(4), p.directions(4));
        assert_ne!(p.directions(4), p.directions(5));
        for d in p.directions(0) {
            assert!(d.z.asin().abs() <= 12.5_f64.to_radians() + 1e-12);
            assert!(d.y.atan2(d.x).abs() <= 40.5_f64.to_radians() + 1e-12);
        }
    }
}
