//! Shared oracles for the integration tests: a naive full-sum renderer, a
//! random scene generator and a finite-difference gradient checker.

#![allow(dead_code)]

use nalgebra::{Matrix2, Matrix2x3, UnitQuaternion, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatslam::camera::CameraModel;
use splatslam::gaussian::GaussianPrimitive;
use splatslam::geometry::{quat_to_wxyz, quat_wxyz, PoseSE3, Vec3, Vec6};
use splatslam::image::{DepthImage, Grid, RgbImage};
use splatslam::renderer::{kernel, render_with_gradients, in_guard_band, DILATION, MIN_TRANSMITTANCE, NEAR_PLANE};

pub struct NaiveImage {
    pub color: RgbImage,
    pub depth: DepthImage,
    pub alpha: Grid<f64>,
}

/// Evaluates every primitive at every pixel, no tiling and no culling
/// beyond the near plane and the guard band.
pub fn naive_render(prims: &[GaussianPrimitive], pose: &PoseSE3, cam: &CameraModel) -> NaiveImage {
    let world_to_cam = pose.inverse();
    let w = world_to_cam.rotation_matrix();
    struct Proj {
        index: usize,
        z: f64,
        center: Vector2<f64>,
        inv: Matrix2<f64>,
        opacity: f64,
        color: Vec3,
    }
    let mut projected: Vec<Proj> = Vec::new();
    for (index, g) in prims.iter().enumerate() {
        let pc = world_to_cam.transform_point(&g.mean);
        if pc.z <= NEAR_PLANE || g.opacity <= 0.0 {
            continue;
        }
        let j = Matrix2x3::new(
            cam.fx / pc.z,
            0.0,
            -cam.fx * pc.x / (pc.z * pc.z),
            0.0,
            cam.fy / pc.z,
            -cam.fy * pc.y / (pc.z * pc.z),
        );
        let cov2 = j * (w * g.covariance() * w.transpose()) * j.transpose() + Matrix2::identity() * DILATION;
        let Some(inv) = cov2.try_inverse() else { continue };
        let center = Vector2::new(cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy);
        if !in_guard_band(cam, center.x, center.y) {
            continue;
        }
        projected.push(Proj { index, z: pc.z, center, inv, opacity: g.opacity, color: g.color });
    }
    projected.sort_by(|a, b| a.z.total_cmp(&b.z).then(a.index.cmp(&b.index)));
    let mut out = NaiveImage {
        color: Grid::filled(cam.width, cam.height, Vec3::zeros()),
        depth: Grid::filled(cam.width, cam.height, 0.0),
        alpha: Grid::filled(cam.width, cam.height, 0.0),
    };
    for row in 0..cam.height {
        for col in 0..cam.width {
            let p = Vector2::new(col as f64, row as f64);
            let (mut c, mut d, mut t) = (Vec3::zeros(), 0.0, 1.0);
            for s in &projected {
                let delta = p - s.center;
                let a = s.opacity * kernel(delta.dot(&(s.inv * delta)));
                if a <= 0.0 {
                    continue;
                }
                c += t * a * s.color;
                d += t * a * s.z;
                t *= 1.0 - a;
                if t < MIN_TRANSMITTANCE {
                    break;
                }
            }
            *out.color.get_mut(col, row) = c;
            *out.depth.get_mut(col, row) = d;
            *out.alpha.get_mut(col, row) = 1.0 - t;
        }
    }
    out
}

pub fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() > 0.1 && v.norm() <= 1.0 {
            return v.normalize();
        }
    }
}

/// `n` random primitives inside the view frustum of `cam` at the identity
/// pose, depths in [2, 5].
pub fn random_scene(rng: &mut ChaCha8Rng, n: usize, cam: &CameraModel, max_opacity: f64) -> Vec<GaussianPrimitive> {
    (0..n)
        .map(|_| {
            let z = rng.random_range(2.0..5.0);
            let u = rng.random_range(0.0..cam.width as f64);
            let v = rng.random_range(0.0..cam.height as f64);
            let mean = cam.backproject(u, v, z);
            let rot = UnitQuaternion::from_scaled_axis(random_unit(rng) * rng.random_range(0.0..3.0));
            let scales = Vec3::new(rng.random_range(0.03..0.3), rng.random_range(0.03..0.3), rng.random_range(0.03..0.3));
            let color = Vec3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            GaussianPrimitive::new(mean, rot, scales, rng.random_range(0.1..max_opacity), color)
        })
        .collect()
}

pub fn small_pose(rng: &mut ChaCha8Rng, scale: f64) -> PoseSE3 {
    PoseSE3::exp(&Vec6::from_fn(|_, _| rng.random_range(-scale..scale)))
}

/// Outcome of a gradient check over one scene.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub passed: usize,
    pub total: usize,
    pub pose_passed: usize,
}

fn agrees(analytic: f64, numeric: f64) -> bool {
    if numeric.abs() < 1e-3 && analytic.abs() < 1e-3 {
        (analytic - numeric).abs() < 1e-6
    } else {
        (analytic - numeric).abs() <= 1e-3 * numeric.abs().max(analytic.abs())
    }
}

/// Central differences with step `h` on every primitive parameter and all
/// six pose components of L = Σ ⟨wc, C⟩ + Σ wd·D for random weights.
pub fn gradient_check(seed: u64, n: usize, h: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = CameraModel::centered(60.0, 48, 40).unwrap();
    let prims = random_scene(&mut rng, n, &cam, 0.8);
    let pose = small_pose(&mut rng, 0.05);
    let wc: RgbImage = Grid {
        width: cam.width,
        height: cam.height,
        data: (0..cam.pixel_count()).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect(),
    };
    let wd: DepthImage = Grid {
        width: cam.width,
        height: cam.height,
        data: (0..cam.pixel_count()).map(|_| rng.random_range(-0.3..0.3)).collect(),
    };
    let loss = |prims: &[GaussianPrimitive], pose: &PoseSE3| -> f64 {
        let buf = splatslam::renderer::render(prims, pose, &cam);
        let mut l = 0.0;
        for i in 0..cam.pixel_count() {
            l += buf.color.data[i].dot(&wc.data[i]) + buf.depth.data[i] * wd.data[i];
        }
        l
    };
    let (_, grads) = render_with_gradients(&prims, &pose, &cam, &wc, &wd);
    let mut out = GradCheck::default();
    let mut check = |analytic: f64, numeric: f64, is_pose: bool| {
        out.total += 1;
        if agrees(analytic, numeric) {
            out.passed += 1;
            if is_pose {
                out.pose_passed += 1;
            }
        }
    };
    for i in 0..prims.len() {
        let diff = |edit: &dyn Fn(&mut GaussianPrimitive, f64)| -> f64 {
            let mut p = prims.clone();
            edit(&mut p[i], h);
            let plus = loss(&p, &pose);
            let mut m = prims.clone();
            edit(&mut m[i], -h);
            let minus = loss(&m, &pose);
            (plus - minus) / (2.0 * h)
        };
        for k in 0..3 {
            check(grads.mean[i][k], diff(&|g, e| g.mean[k] += e), false);
            check(grads.log_scales[i][k], diff(&|g, e| g.log_scales[k] += e), false);
            check(grads.color[i][k], diff(&|g, e| g.color[k] += e), false);
        }
        check(grads.opacity[i], diff(&|g, e| g.opacity += e), false);
        for k in 0..4 {
            let numeric = diff(&|g, e| {
                let mut q = quat_to_wxyz(&g.rotation);
                q[k] += e;
                g.rotation = quat_wxyz(q);
            });
            check(grads.rotation[i][k], numeric, false);
        }
    }
    for k in 0..6 {
        let mut d = Vec6::zeros();
        d[k] = h;
        let numeric = (loss(&prims, &pose.retract(&d)) - loss(&prims, &pose.retract(&-d))) / (2.0 * h);
        check(grads.pose[k], numeric, true);
    }
    out
}
