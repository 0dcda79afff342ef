//! CPU tile rasterizer for Gaussian maps with a reverse-mode backward pass.
//!
//! Each primitive is projected to an image-plane Gaussian with the local
//! affine (EWA) approximation, `Σ₂ = J W Σ Wᵀ Jᵀ + 0.3 I`. Per pixel the
//! primitives are composited front to back by camera depth of their means
//! (ties by index) with weight `a = α K(q)`, where `q` is the squared
//! Mahalanobis distance of the pixel center.
//!
//! `K` is the Gaussian `exp(−q/2)` with a linear taper subtracted so it
//! reaches zero with zero slope at the 3σ cutoff `q = 9`, then rescaled to
//! keep `K(0) = 1`. The taper keeps the rendered image C¹ in every
//! parameter, which the optimizer and the finite-difference checks rely on.

use crate::camera::CameraModel;
use crate::gaussian::GaussianPrimitive;
use crate::geometry::{vee_antisym, Mat3, PoseSE3, Vec3, Vec6};
use crate::image::{write_pfm, write_ppm, DepthImage, Grid, ImageIoError, RgbImage};
use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;
use std::path::Path;

pub const TILE_SIZE: usize = 16;
/// Squared Mahalanobis radius of the footprint (3σ).
pub const CUTOFF_Q: f64 = 9.0;
/// Screen-space dilation added to the projected covariance, in px².
pub const DILATION: f64 = 0.3;
/// Compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Primitives closer to the camera than this are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Primitives whose projected center lies further outside the image than
/// this fraction of its size are culled. Far off-axis the linearized
/// projection blows up into splats that cover the whole view.
pub const FRUSTUM_GUARD: f64 = 0.3;

/// True when a projected center is inside the image grown by the guard band.
pub fn in_guard_band(cam: &CameraModel, u: f64, v: f64) -> bool {
    let (w, h) = (cam.width as f64, cam.height as f64);
    u >= -FRUSTUM_GUARD * w && u <= (1.0 + FRUSTUM_GUARD) * w && v >= -FRUSTUM_GUARD * h && v <= (1.0 + FRUSTUM_GUARD) * h
}

const TAPER_E: f64 = 0.011_108_996_538_242_306; // exp(-4.5)
const TAPER_NORM: f64 = 1.0 - 5.5 * TAPER_E;

/// Footprint kernel; 1 at the center, 0 (with zero slope) at `q = 9`.
#[inline]
pub fn kernel(q: f64) -> f64 {
    if q >= CUTOFF_Q {
        return 0.0;
    }
    ((-0.5 * q).exp() - TAPER_E * (1.0 + 0.5 * (CUTOFF_Q - q))) / TAPER_NORM
}

#[inline]
pub fn kernel_derivative(q: f64) -> f64 {
    if q >= CUTOFF_Q {
        return 0.0;
    }
    (-0.5 * (-0.5 * q).exp() + 0.5 * TAPER_E) / TAPER_NORM
}

#[derive(Clone, Debug)]
pub struct RenderBuffer {
    pub color: RgbImage,
    pub depth: DepthImage,
    /// Accumulated opacity `1 − T_final` per pixel.
    pub alpha_accum: Grid<f64>,
}

impl RenderBuffer {
    pub fn write_images(&self, dir: &Path, stem: &str) -> Result<(), ImageIoError> {
        write_ppm(&dir.join(format!("{stem}.ppm")), &self.color)?;
        write_pfm(&dir.join(format!("{stem}.pfm")), &self.depth)
    }
}

/// Gradients of a scalar loss with respect to every primitive parameter and
/// the camera pose (right perturbation, `(v, ω)` order).
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients {
    pub mean: Vec<Vec3>,
    pub log_scales: Vec<Vec3>,
    /// Tangent-projected gradient w.r.t. the quaternion components `(w, x, y, z)`.
    pub rotation: Vec<[f64; 4]>,
    pub opacity: Vec<f64>,
    pub color: Vec<Vec3>,
    pub pose: Vec6,
}

impl RenderGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            mean: vec![Vec3::zeros(); n],
            log_scales: vec![Vec3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            opacity: vec![0.0; n],
            color: vec![Vec3::zeros(); n],
            pose: Vec6::zeros(),
        }
    }
}

/// A primitive after projection into one camera.
#[derive(Clone, Copy, Debug)]
struct Splat {
    index: usize,
    /// Camera-frame mean.
    pc: Vec3,
    center: Vector2<f64>,
    /// Half extents of the box holding the nonzero footprint.
    extent: Vector2<f64>,
    conic: Matrix2<f64>,
    cov_cam: Mat3,
    jac: Matrix2x3<f64>,
    opacity: f64,
    color: Vec3,
}

/// The part of a splat read for every pixel it might cover, kept compact
/// so tile lists can be scanned from a contiguous copy.
#[derive(Clone, Copy)]
struct Footprint {
    center: Vector2<f64>,
    extent: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
}

impl Footprint {
    /// `Some((q, d))` when the pixel lies inside the bounding box.
    #[inline]
    fn quadratic(&self, p: &Vector2<f64>) -> Option<(f64, Vector2<f64>)> {
        let d = p - self.center;
        if d.x.abs() > self.extent.x || d.y.abs() > self.extent.y {
            return None;
        }
        Some((d.dot(&(self.conic * d)), d))
    }
}

/// Projection and tile binning of a primitive set for one view, shared by
/// the forward and backward passes.
pub struct Rasterizer<'a> {
    primitives: &'a [GaussianPrimitive],
    pose: PoseSE3,
    cam: CameraModel,
    splats: Vec<Splat>,
    tiles_x: usize,
    tiles_y: usize,
    /// Per tile, positions into `splats` in compositing order.
    tiles: Vec<Vec<u32>>,
}

fn project(index: usize, g: &GaussianPrimitive, w: &Mat3, t_cw: &Vec3, cam: &CameraModel) -> Option<(Splat, Vector2<f64>)> {
    if g.opacity <= 0.0 {
        return None;
    }
    let pc = w * g.mean + t_cw;
    if pc.z <= NEAR_PLANE {
        return None;
    }
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let jac = Matrix2x3::new(cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z));
    let cov_cam = w * g.covariance() * w.transpose();
    let cov2 = jac * cov_cam * jac.transpose() + Matrix2::identity() * DILATION;
    let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
    if !(det > 0.0) {
        return None;
    }
    let conic = Matrix2::new(cov2[(1, 1)], -cov2[(0, 1)], -cov2[(1, 0)], cov2[(0, 0)]) / det;
    // axis-aligned half extents of the ellipse q = CUTOFF_Q
    let extent = Vector2::new((CUTOFF_Q * cov2[(0, 0)]).sqrt(), (CUTOFF_Q * cov2[(1, 1)]).sqrt());
    let center = Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);
    if !center.iter().all(|c| c.is_finite()) || !extent.iter().all(|e| e.is_finite()) || !in_guard_band(cam, center.x, center.y) {
        return None;
    }
    Some((Splat { index, pc, center, extent, conic, cov_cam, jac, opacity: g.opacity, color: g.color }, extent))
}

impl<'a> Rasterizer<'a> {
    pub fn new(primitives: &'a [GaussianPrimitive], pose: &PoseSE3, cam: &CameraModel) -> Self {
        let w = pose.rotation_matrix().transpose();
        let t_cw = -(w * pose.translation);
        let projected: Vec<Option<(Splat, Vector2<f64>)>> =
            primitives.par_iter().enumerate().map(|(i, g)| project(i, g, &w, &t_cw, cam)).collect();
        let tiles_x = cam.width.div_ceil(TILE_SIZE);
        let tiles_y = cam.height.div_ceil(TILE_SIZE);
        let mut splats = Vec::new();
        let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
        let (wmax, hmax) = (cam.width as f64 - 1.0, cam.height as f64 - 1.0);
        for (s, extent) in projected.into_iter().flatten() {
            let (x0, x1) = (s.center.x - extent.x, s.center.x + extent.x);
            let (y0, y1) = (s.center.y - extent.y, s.center.y + extent.y);
            if x1 < 0.0 || y1 < 0.0 || x0 > wmax || y0 > hmax {
                continue;
            }
            let tx0 = (x0.max(0.0).ceil() as usize) / TILE_SIZE;
            let tx1 = (x1.min(wmax).floor() as usize) / TILE_SIZE;
            let ty0 = (y0.max(0.0).ceil() as usize) / TILE_SIZE;
            let ty1 = (y1.min(hmax).floor() as usize) / TILE_SIZE;
            let pos = splats.len() as u32;
            splats.push(s);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    tiles[ty * tiles_x + tx].push(pos);
                }
            }
        }
        tiles.par_iter_mut().for_each(|list| {
            list.sort_by(|&a, &b| {
                let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
                sa.pc.z.total_cmp(&sb.pc.z).then(sa.index.cmp(&sb.index))
            })
        });
        Self { primitives, pose: *pose, cam: *cam, splats, tiles_x, tiles_y, tiles }
    }

    fn footprints(&self, list: &[u32]) -> Vec<Footprint> {
        list.iter()
            .map(|&k| {
                let s = &self.splats[k as usize];
                Footprint { center: s.center, extent: s.extent, conic: s.conic, opacity: s.opacity }
            })
            .collect()
    }

    /// Indices of primitives whose footprint touches the image.
    pub fn visible(&self) -> Vec<usize> {
        self.splats.iter().map(|s| s.index).collect()
    }

    fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let (w, h) = (self.cam.width, self.cam.height);
        let cols = tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w);
        let rows = ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h);
        rows.flat_map(move |r| cols.clone().map(move |c| (c, r)))
    }

    pub fn forward(&self) -> RenderBuffer {
        let (w, h) = (self.cam.width, self.cam.height);
        let per_tile: Vec<Vec<(usize, Vec3, f64, f64)>> = (0..self.tiles_x * self.tiles_y)
            .into_par_iter()
            .map(|tile| {
                let list = &self.tiles[tile];
                let hot = self.footprints(list);
                self.tile_pixels(tile)
                    .map(|(col, row)| {
                        let p = Vector2::new(col as f64, row as f64);
                        let mut color = Vec3::zeros();
                        let mut depth = 0.0;
                        let mut t = 1.0;
                        for (f, &k) in hot.iter().zip(list) {
                            let Some((q, _)) = f.quadratic(&p) else { continue };
                            let kq = kernel(q);
                            if kq <= 0.0 {
                                continue;
                            }
                            let s = &self.splats[k as usize];
                            let a = f.opacity * kq;
                            color += (t * a) * s.color;
                            depth += t * a * s.pc.z;
                            t *= 1.0 - a;
                            if t < MIN_TRANSMITTANCE {
                                break;
                            }
                        }
                        (row * w + col, color, depth, 1.0 - t)
                    })
                    .collect()
            })
            .collect();
        let mut buf = RenderBuffer {
            color: Grid::filled(w, h, Vec3::zeros()),
            depth: Grid::filled(w, h, 0.0),
            alpha_accum: Grid::filled(w, h, 0.0),
        };
        for (i, c, d, a) in per_tile.into_iter().flatten() {
            buf.color.data[i] = c;
            buf.depth.data[i] = d;
            buf.alpha_accum.data[i] = a;
        }
        buf
    }

    /// Reverse-mode pass for upstream image gradients `dL/dC` and `dL/dD`.
    pub fn backward(&self, dl_dcolor: &RgbImage, dl_ddepth: &DepthImage) -> RenderGradients {
        assert!(
            dl_dcolor.width == self.cam.width && dl_dcolor.height == self.cam.height && dl_dcolor.same_shape(dl_ddepth),
            "upstream gradient dimensions must match the camera"
        );
        let per_tile: Vec<Vec<SplatGrad>> = (0..self.tiles_x * self.tiles_y)
            .into_par_iter()
            .map(|tile| self.backward_tile(tile, dl_dcolor, dl_ddepth))
            .collect();
        // deterministic reduction in tile order
        let mut acc = vec![SplatGrad::default(); self.splats.len()];
        for (tile, grads) in per_tile.iter().enumerate() {
            for (k, g) in self.tiles[tile].iter().zip(grads) {
                acc[*k as usize].add(g);
            }
        }
        let w = self.pose.rotation_matrix().transpose();
        let per_splat: Vec<(usize, ParamGrad, Vec6)> = self
            .splats
            .par_iter()
            .zip(acc.par_iter())
            .map(|(s, g)| {
                let (pg, pose) = self.chain(s, g, &w);
                (s.index, pg, pose)
            })
            .collect();
        let mut out = RenderGradients::zeros(self.primitives.len());
        for (i, pg, pose) in per_splat {
            out.mean[i] = pg.mean;
            out.log_scales[i] = pg.log_scales;
            out.rotation[i] = pg.rotation;
            out.opacity[i] = pg.opacity;
            out.color[i] = pg.color;
            out.pose += pose;
        }
        out
    }

    fn backward_tile(&self, tile: usize, dl_dcolor: &RgbImage, dl_ddepth: &DepthImage) -> Vec<SplatGrad> {
        let list = &self.tiles[tile];
        let hot = self.footprints(list);
        let mut grads = vec![SplatGrad::default(); list.len()];
        // (position in tile list, a, K(q), q, d, T before)
        let mut contrib: Vec<(usize, f64, f64, f64, Vector2<f64>, f64)> = Vec::new();
        for (col, row) in self.tile_pixels(tile) {
            let gc = *dl_dcolor.get(col, row);
            let gd = *dl_ddepth.get(col, row);
            if gc == Vec3::zeros() && gd == 0.0 {
                continue;
            }
            let p = Vector2::new(col as f64, row as f64);
            contrib.clear();
            let mut t = 1.0;
            for (pos, f) in hot.iter().enumerate() {
                let Some((q, d)) = f.quadratic(&p) else { continue };
                let kq = kernel(q);
                if kq <= 0.0 {
                    continue;
                }
                let a = f.opacity * kq;
                contrib.push((pos, a, kq, q, d, t));
                t *= 1.0 - a;
                if t < MIN_TRANSMITTANCE {
                    break;
                }
            }
            let mut behind = 0.0;
            for &(pos, a, kq, q, d, t_i) in contrib.iter().rev() {
                let s = &self.splats[list[pos] as usize];
                let g_i = gc.dot(&s.color) + gd * s.pc.z;
                let dl_da = t_i * (g_i - behind);
                behind = g_i * a + (1.0 - a) * behind;
                let acc = &mut grads[pos];
                acc.color += (t_i * a) * gc;
                acc.depth += t_i * a * gd;
                acc.opacity += dl_da * kq;
                let dl_dq = dl_da * s.opacity * kernel_derivative(q);
                if dl_dq != 0.0 {
                    let qd = s.conic * d;
                    acc.center -= 2.0 * dl_dq * qd;
                    acc.conic += dl_dq * d * d.transpose();
                }
            }
        }
        grads
    }

    /// Chain rule from image-plane quantities back to 3D parameters and pose.
    fn chain(&self, s: &Splat, g: &SplatGrad, w: &Mat3) -> (ParamGrad, Vec6) {
        let prim = &self.primitives[s.index];
        let cam = &self.cam;
        // conic = cov2⁻¹
        let g_cov2 = -(s.conic * g.conic * s.conic);
        let g_cov_cam = s.jac.transpose() * g_cov2 * s.jac;
        let g_jac = 2.0 * g_cov2 * s.jac * s.cov_cam;
        let (x, y, z) = (s.pc.x, s.pc.y, s.pc.z);
        let mut g_pc = s.jac.transpose() * g.center;
        g_pc.z += g.depth;
        let z2 = z * z;
        let z3 = z2 * z;
        g_pc.x += g_jac[(0, 2)] * (-cam.fx / z2);
        g_pc.y += g_jac[(1, 2)] * (-cam.fy / z2);
        g_pc.z += g_jac[(0, 0)] * (-cam.fx / z2)
            + g_jac[(0, 2)] * (2.0 * cam.fx * x / z3)
            + g_jac[(1, 1)] * (-cam.fy / z2)
            + g_jac[(1, 2)] * (2.0 * cam.fy * y / z3);
        let mean = w.transpose() * g_pc;
        // Σ = (R S)(R S)ᵀ
        let g_sigma = w.transpose() * g_cov_cam * w;
        let r = prim.rotation_matrix();
        let scales = prim.scales();
        let m = r * Mat3::from_diagonal(&scales);
        let g_m = 2.0 * g_sigma * m;
        let g_r = g_m * Mat3::from_diagonal(&scales);
        let rt_gm = r.transpose() * g_m;
        let log_scales = Vec3::new(rt_gm[(0, 0)] * scales.x, rt_gm[(1, 1)] * scales.y, rt_gm[(2, 2)] * scales.z);
        let rotation = quaternion_gradient(&prim.rotation, &g_r);
        // camera pose, right perturbation: δp_c = −v + p_c × ω, δΣc = −[ω]×Σc + Σc[ω]×
        let v = -g_pc;
        let omega = g_pc.cross(&s.pc) - 2.0 * vee_antisym(&(s.cov_cam * g_cov_cam));
        let pose = Vec6::new(v.x, v.y, v.z, omega.x, omega.y, omega.z);
        (ParamGrad { mean, log_scales, rotation, opacity: g.opacity, color: g.color }, pose)
    }
}

#[derive(Clone, Copy, Debug)]
struct SplatGrad {
    center: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vec3,
    depth: f64,
}

impl Default for SplatGrad {
    fn default() -> Self {
        Self { center: Vector2::zeros(), conic: Matrix2::zeros(), opacity: 0.0, color: Vec3::zeros(), depth: 0.0 }
    }
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.center += o.center;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.color += o.color;
        self.depth += o.depth;
    }
}

struct ParamGrad {
    mean: Vec3,
    log_scales: Vec3,
    rotation: [f64; 4],
    opacity: f64,
    color: Vec3,
}

/// dL/dq for `R(q)` of a unit quaternion, projected onto the tangent space.
fn quaternion_gradient(q: &nalgebra::UnitQuaternion<f64>, g_r: &Mat3) -> [f64; 4] {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    #[rustfmt::skip]
    let dr = [
        Mat3::new( 0.0, -z,  y,   z,  0.0, -x,  -y,  x,  0.0),
        Mat3::new( 0.0,  y,  z,   y, -2.0 * x, -w,   z,  w, -2.0 * x),
        Mat3::new(-2.0 * y,  x,  w,   x,  0.0,  z,  -w,  z, -2.0 * y),
        Mat3::new(-2.0 * z, -w,  x,   w, -2.0 * z,  y,   x,  y,  0.0),
    ];
    let raw: Vec<f64> = dr.iter().map(|d| 2.0 * g_r.component_mul(d).sum()).collect();
    let qv = [w, x, y, z];
    let dot: f64 = raw.iter().zip(&qv).map(|(a, b)| a * b).sum();
    [raw[0] - dot * w, raw[1] - dot * x, raw[2] - dot * y, raw[3] - dot * z]
}

pub fn render(primitives: &[GaussianPrimitive], pose: &PoseSE3, cam: &CameraModel) -> RenderBuffer {
    Rasterizer::new(primitives, pose, cam).forward()
}

/// Forward pass plus gradients for the given upstream image gradients.
pub fn render_with_gradients(
    primitives: &[GaussianPrimitive],
    pose: &PoseSE3,
    cam: &CameraModel,
    dl_dcolor: &RgbImage,
    dl_ddepth: &DepthImage,
) -> (RenderBuffer, RenderGradients) {
    let r = Rasterizer::new(primitives, pose, cam);
    (r.forward(), r.backward(dl_dcolor, dl_ddepth))
}
