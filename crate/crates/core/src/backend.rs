//! Back-end: per batch of keyframes, a pose round (map frozen) followed by a
//! map round (poses frozen) on the rendering loss
//! `(1 − λ1)·E_pho + λ1·E_geo + λ2·E_normal`.

use crate::camera::{forward_lidar_extrinsics, CameraModel};
use crate::gaussian::{GaussianPrimitive, Origin};
use crate::geometry::{quat_to_wxyz, quat_wxyz, PoseSE3, Vec3, Vec6};
use crate::image::{DepthImage, Grid, RgbImage};
use crate::map::{
    cgc_split, init_skybox_at, insert_keyframe_points, prune, seed_color_primitives, GaussianMap, InsertParams, MapError,
    PruneParams,
};
use crate::renderer::{Rasterizer, RenderGradients};
use crate::sensor::Frame;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub e_pho: f64,
    pub e_geo: f64,
    pub e_normal: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    pub fn new(e_pho: f64, e_geo: f64, e_normal: f64, lambda1: f64, lambda2: f64) -> Self {
        let total = (1.0 - lambda1) * e_pho + lambda1 * e_geo + lambda2 * e_normal;
        Self { e_pho, e_geo, e_normal, total, lambda1, lambda2 }
    }

    /// Component-wise mean; the total is recomputed from the means.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let (l1, l2) = items.first().map_or((0.0, 0.0), |l| (l.lambda1, l.lambda2));
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self::new(sum(|l| l.e_pho), sum(|l| l.e_geo), sum(|l| l.e_normal), l1, l2)
    }
}

#[derive(Clone, Debug)]
pub struct KeyframeRecord {
    pub frame: Frame,
    pub pose: PoseSE3,
    pub insertion_event: usize,
}

impl KeyframeRecord {
    /// The very first keyframe anchors the gauge and is never moved.
    pub fn is_gauge(&self) -> bool {
        self.insertion_event == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub mean: f64,
    pub log_scales: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { mean: 1.6e-4, log_scales: 5e-3, rotation: 1e-3, opacity: 5e-2, color: 2.5e-3 }
    }
}

/// Loss and (optionally) its gradients for one keyframe.
pub struct KeyframeEval {
    pub loss: LossBreakdown,
    pub grads: Option<RenderGradients>,
    pub visible: Vec<usize>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Evaluates the loss of one keyframe; with `want_grads` also returns
/// gradients of the total with respect to all parameters and the pose.
pub fn evaluate_keyframe(
    prims: &[GaussianPrimitive],
    frame: &Frame,
    pose: &PoseSE3,
    cam: &CameraModel,
    lambda1: f64,
    lambda2: f64,
    want_grads: bool,
) -> KeyframeEval {
    let raster = Rasterizer::new(prims, pose, cam);
    let buf = raster.forward();
    let n_px = cam.pixel_count();
    let mut e_pho = 0.0;
    let mut e_geo = 0.0;
    let mut n_lidar = 0usize;
    for i in 0..n_px {
        let d = buf.color.data[i] - frame.image.data[i];
        e_pho += d.x.abs() + d.y.abs() + d.z.abs();
        let target = frame.depth.data[i];
        if target > 0.0 {
            e_geo += (buf.depth.data[i] - target).abs();
            n_lidar += 1;
        }
    }
    e_pho /= (3 * n_px) as f64;
    if n_lidar > 0 {
        e_geo /= n_lidar as f64;
    }
    let visible: Vec<usize> = raster.visible().into_iter().filter(|&i| prims[i].origin != Origin::Skybox).collect();
    let e_normal = if visible.is_empty() {
        0.0
    } else {
        visible.iter().map(|&i| prims[i].sigma_along()).sum::<f64>() / visible.len() as f64
    };
    let loss = LossBreakdown::new(e_pho, e_geo, e_normal, lambda1, lambda2);
    let grads = want_grads.then(|| {
        let wc = (1.0 - lambda1) / (3 * n_px) as f64;
        let wd = if n_lidar > 0 { lambda1 / n_lidar as f64 } else { 0.0 };
        let mut dl_dc: RgbImage = Grid::filled(cam.width, cam.height, Vec3::zeros());
        let mut dl_dd: DepthImage = Grid::filled(cam.width, cam.height, 0.0);
        for i in 0..n_px {
            dl_dc.data[i] = (buf.color.data[i] - frame.image.data[i]).map(|v| wc * sign(v));
            let target = frame.depth.data[i];
            if target > 0.0 {
                dl_dd.data[i] = wd * sign(buf.depth.data[i] - target);
            }
        }
        let mut g = raster.backward(&dl_dc, &dl_dd);
        if !visible.is_empty() {
            let w = lambda2 / visible.len() as f64;
            for &i in &visible {
                let axis = prims[i].normal_axis();
                g.log_scales[i][axis] += w * prims[i].sigma_along();
            }
        }
        g
    });
    KeyframeEval { loss, grads, visible }
}

pub fn compute_loss(prims: &[GaussianPrimitive], kf: &KeyframeRecord, cam: &CameraModel, lambda1: f64, lambda2: f64) -> LossBreakdown {
    evaluate_keyframe(prims, &kf.frame, &kf.pose, cam, lambda1, lambda2, false).loss
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundLog {
    pub batch: usize,
    /// 1 for the pose round, 2 for the map round.
    pub round: u8,
    pub iter: usize,
    pub loss: LossBreakdown,
}

pub const CSV_HEADER: &str = "batch,round,iter,E_pho,E_geo,E_normal,total";

pub fn format_csv(rows: &[RoundLog]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{:.9},{:.9},{:.9},{:.9}",
            r.batch, r.round, r.iter, r.loss.e_pho, r.loss.e_geo, r.loss.e_normal, r.loss.total
        )
        .unwrap();
    }
    s
}

fn window_loss(prims: &[GaussianPrimitive], window: &[KeyframeRecord], poses: &[PoseSE3], cam: &CameraModel, l1: f64, l2: f64) -> LossBreakdown {
    let items: Vec<LossBreakdown> = window
        .iter()
        .zip(poses)
        .map(|(kf, p)| evaluate_keyframe(prims, &kf.frame, p, cam, l1, l2, false).loss)
        .collect();
    LossBreakdown::mean(&items)
}

/// Pose round: joint gradient descent with backtracking line search on the
/// window-averaged loss. The map is not touched and the gauge keyframe never
/// moves. Rotation steps are scaled by the inverse squared median scene depth
/// so that both halves of the twist move pixels comparably.
pub fn optimize_poses(
    prims: &[GaussianPrimitive],
    window: &mut [KeyframeRecord],
    cam: &CameraModel,
    iters: usize,
    lambda1: f64,
    lambda2: f64,
) -> Vec<LossBreakdown> {
    let mut history = Vec::new();
    if iters == 0 || window.is_empty() {
        return history;
    }
    let free: Vec<bool> = window.iter().map(|k| !k.is_gauge()).collect();
    if !free.iter().any(|&f| f) {
        return history;
    }
    let mut poses: Vec<PoseSE3> = window.iter().map(|k| k.pose).collect();
    let depth_scale: Vec<f64> = window
        .iter()
        .map(|k| {
            let mut d: Vec<f64> = k.frame.depth.data.iter().copied().filter(|&z| z > 0.0).collect();
            if d.is_empty() {
                return 1.0;
            }
            d.sort_by(f64::total_cmp);
            d[d.len() / 2].max(0.1)
        })
        .collect();
    let mut step = 1e-3;
    let mut current = window_loss(prims, window, &poses, cam, lambda1, lambda2);
    for _ in 0..iters {
        let n = window.len() as f64;
        let grads: Vec<Vec6> = window
            .iter()
            .zip(&poses)
            .map(|(kf, p)| {
                let e = evaluate_keyframe(prims, &kf.frame, p, cam, lambda1, lambda2, true);
                e.grads.map_or(Vec6::zeros(), |g| g.pose / n)
            })
            .collect();
        let directions: Vec<Vec6> = grads
            .iter()
            .zip(&depth_scale)
            .zip(&free)
            .map(|((g, d), &f)| {
                if !f {
                    return Vec6::zeros();
                }
                let mut dir = -g;
                for k in 3..6 {
                    dir[k] /= d * d;
                }
                dir
            })
            .collect();
        let slope: f64 = grads.iter().zip(&directions).map(|(g, d)| g.dot(d)).sum();
        if slope >= 0.0 {
            break;
        }
        let mut accepted = false;
        for _ in 0..20 {
            let trial: Vec<PoseSE3> = poses.iter().zip(&directions).map(|(p, d)| p.retract(&(d * step))).collect();
            let loss = window_loss(prims, window, &trial, cam, lambda1, lambda2);
            if loss.total <= current.total + 1e-4 * step * slope {
                poses = trial;
                current = loss;
                accepted = true;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        history.push(current);
        if !accepted {
            break;
        }
    }
    for ((kf, p), &f) in window.iter_mut().zip(poses).zip(&free) {
        if f {
            kf.pose = p;
        }
    }
    history
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-15;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn tick(&mut self) {
        self.t += 1;
    }

    /// Step for parameter slot `i` with gradient `g`.
    fn step(&mut self, i: usize, g: f64, lr: f64) -> f64 {
        self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
        self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
        let mh = self.m[i] / (1.0 - Self::B1.powi(self.t));
        let vh = self.v[i] / (1.0 - Self::B2.powi(self.t));
        -lr * mh / (vh.sqrt() + Self::EPS)
    }
}

/// Camera radius of the window: 1.1 times the largest distance of a
/// keyframe center from their centroid, at least 1.
pub fn scene_extent(window: &[KeyframeRecord]) -> f64 {
    if window.is_empty() {
        return 1.0;
    }
    let c = window.iter().map(|k| k.pose.translation).sum::<Vec3>() / window.len() as f64;
    (1.1 * window.iter().map(|k| (k.pose.translation - c).norm()).fold(0.0, f64::max)).max(1.0)
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Map round: Adam on mean, log-scales, quaternion, opacity logit and color
/// of every primitive visible from some window keyframe. Returns the
/// window-averaged loss before each iteration plus after the last one, and
/// the indices that were optimized.
pub fn optimize_map(
    map: &mut GaussianMap,
    window: &[KeyframeRecord],
    cam: &CameraModel,
    iters: usize,
    rates: &LearningRates,
    lambda1: f64,
    lambda2: f64,
) -> (Vec<LossBreakdown>, Vec<usize>) {
    let n = map.len();
    let mut history = Vec::new();
    if iters == 0 || window.is_empty() || n == 0 {
        return (history, Vec::new());
    }
    let backup = map.primitives().to_vec();
    let mut prims = backup.clone();
    let extent = scene_extent(window);
    const SLOTS: usize = 14;
    let mut adam = Adam::new(n * SLOTS);
    let mut touched = vec![false; n];
    let kf_count = window.len() as f64;
    for _ in 0..iters {
        let mut losses = Vec::with_capacity(window.len());
        let mut total = RenderGradients::zeros(n);
        for kf in window {
            let e = evaluate_keyframe(&prims, &kf.frame, &kf.pose, cam, lambda1, lambda2, true);
            for &i in &e.visible {
                touched[i] = true;
            }
            let g = e.grads.expect("gradients requested");
            for i in 0..n {
                total.mean[i] += g.mean[i] / kf_count;
                total.log_scales[i] += g.log_scales[i] / kf_count;
                for k in 0..4 {
                    total.rotation[i][k] += g.rotation[i][k] / kf_count;
                }
                total.opacity[i] += g.opacity[i] / kf_count;
                total.color[i] += g.color[i] / kf_count;
            }
            losses.push(e.loss);
        }
        history.push(LossBreakdown::mean(&losses));
        adam.tick();
        for i in 0..n {
            if !touched[i] {
                continue;
            }
            let g = &mut prims[i];
            let base = i * SLOTS;
            let old_normal = g.normal();
            for k in 0..3 {
                g.mean[k] += adam.step(base + k, total.mean[i][k], rates.mean * extent);
                g.log_scales[k] += adam.step(base + 3 + k, total.log_scales[i][k], rates.log_scales);
                g.color[k] = (g.color[k] + adam.step(base + 6 + k, total.color[i][k], rates.color)).clamp(0.0, 1.0);
            }
            let mut q = quat_to_wxyz(&g.rotation);
            for (k, qk) in q.iter_mut().enumerate() {
                *qk += adam.step(base + 9 + k, total.rotation[i][k], rates.rotation);
            }
            g.rotation = quat_wxyz(q);
            let a = g.opacity;
            let dl_dlogit = total.opacity[i] * a * (1.0 - a);
            g.opacity = sigmoid((logit(a) + adam.step(base + 13, dl_dlogit, rates.opacity)).clamp(-20.0, 20.0));
            g.clamp_scales();
            if g.normal().dot(&old_normal) < 0.0 {
                g.normal_flipped = !g.normal_flipped;
            }
        }
    }
    if prims.iter().all(|g| g.is_finite()) {
        map.update(|ps| ps.clone_from_slice(&prims));
    } else {
        log::warn!("map round produced non-finite parameters; round discarded");
        map.update(|ps| ps.clone_from_slice(&backup));
    }
    history.push(window_loss(map.primitives(), window, &window.iter().map(|k| k.pose).collect::<Vec<_>>(), cam, lambda1, lambda2));
    let optimized: Vec<usize> = (0..n).filter(|&i| touched[i]).collect();
    (history, optimized)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackendParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub batch_size: usize,
    pub pose_iters: usize,
    pub map_iters: usize,
    pub rates: LearningRates,
    pub insert: InsertParams,
    pub prune: PruneParams,
    /// Pixel stride of color-only seeds; 0 disables them.
    pub color_seed_stride: usize,
    pub skybox_count: usize,
    pub skybox_radius: f64,
    /// Insertion events kept in the tracking submap.
    pub window_events: usize,
}

impl Default for BackendParams {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.01,
            batch_size: 5,
            pose_iters: 10,
            map_iters: 20,
            rates: LearningRates::default(),
            insert: InsertParams::default(),
            prune: PruneParams::default(),
            color_seed_stride: 16,
            skybox_count: 1000,
            skybox_radius: 50.0,
            window_events: crate::map::DEFAULT_WINDOW_EVENTS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepStatus {
    /// Keyframe inserted, waiting for the batch to fill.
    Queued { pending: usize },
    /// A full batch ran both rounds.
    Optimized { batch: usize, removed: usize },
}

/// Owns the map and keyframes; all map mutation happens here.
pub struct Backend {
    pub map: GaussianMap,
    pub keyframes: Vec<KeyframeRecord>,
    pub log: Vec<RoundLog>,
    params: BackendParams,
    cam: CameraModel,
    pending: Vec<usize>,
    batches: usize,
}

impl Backend {
    pub fn new(cam: CameraModel, params: BackendParams) -> Self {
        Self { map: GaussianMap::with_window(params.window_events), keyframes: Vec::new(), log: Vec::new(), params, cam, pending: Vec::new(), batches: 0 }
    }

    pub fn params(&self) -> &BackendParams {
        &self.params
    }

    pub fn camera(&self) -> &CameraModel {
        &self.cam
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    /// Adds a tracked keyframe and runs a batch once `batch_size`
    /// keyframes are pending.
    pub fn step(&mut self, frame: Frame, pose: PoseSE3) -> StepStatus {
        self.insert(frame, pose);
        self.optimize_if_ready().unwrap_or(StepStatus::Queued { pending: self.pending.len() })
    }

    /// Inserts the keyframe's LiDAR primitives and color seeds and
    /// re-anchors color-only primitives. The first keyframe also places the
    /// sky shell, level with that camera.
    pub fn insert(&mut self, frame: Frame, pose: PoseSE3) {
        let first = self.keyframes.is_empty();
        insert_keyframe_points(&mut self.map, &frame, &pose, &self.cam, &self.params.insert);
        if first && self.params.skybox_count > 0 {
            let level = PoseSE3::new(forward_lidar_extrinsics(0.0).rotation, Vec3::zeros());
            init_skybox_at(&mut self.map, self.params.skybox_count, self.params.skybox_radius, &pose.compose(&level));
        }
        seed_color_primitives(&mut self.map, &frame, &pose, &self.cam, self.params.color_seed_stride, self.params.insert.initial_opacity);
        let color_only: Vec<usize> =
            (0..self.map.len()).filter(|&i| self.map.primitives()[i].origin == Origin::Color).collect();
        match cgc_split(&mut self.map, &color_only, frame.index) {
            Ok(_) | Err(MapError::NoReliableAnchor) => {}
            Err(e) => log::warn!("split skipped: {e}"),
        }
        let event = self.keyframes.len();
        self.keyframes.push(KeyframeRecord { frame, pose, insertion_event: event });
        self.pending.push(event);
    }

    /// Runs a batch if `batch_size` keyframes are pending.
    pub fn optimize_if_ready(&mut self) -> Option<StepStatus> {
        (self.pending.len() >= self.params.batch_size).then(|| self.run_batch())
    }

    /// Runs both rounds on whatever is pending.
    pub fn flush(&mut self) -> Option<StepStatus> {
        (!self.pending.is_empty()).then(|| self.run_batch())
    }

    fn run_batch(&mut self) -> StepStatus {
        let batch = self.batches;
        self.batches += 1;
        let ids: Vec<usize> = std::mem::take(&mut self.pending);
        let mut window: Vec<KeyframeRecord> = ids.iter().map(|&i| self.keyframes[i].clone()).collect();
        let p = self.params;
        let pose_hist = optimize_poses(self.map.primitives(), &mut window, &self.cam, p.pose_iters, p.lambda1, p.lambda2);
        for (iter, loss) in pose_hist.into_iter().enumerate() {
            self.log.push(RoundLog { batch, round: 1, iter, loss });
        }
        let (map_hist, optimized) = optimize_map(&mut self.map, &window, &self.cam, p.map_iters, &p.rates, p.lambda1, p.lambda2);
        for (iter, loss) in map_hist.into_iter().enumerate() {
            self.log.push(RoundLog { batch, round: 2, iter, loss });
        }
        for (id, kf) in ids.iter().zip(window) {
            self.keyframes[*id].pose = kf.pose;
        }
        let mut opt = vec![false; self.map.len()];
        for i in optimized {
            opt[i] = true;
        }
        self.map.update(|ps| {
            for (g, &o) in ps.iter_mut().zip(&opt) {
                if o {
                    g.rounds_optimized += 1;
                }
            }
        });
        let removed = prune(&mut self.map, &p.prune);
        // splits that made it through a round and the prune become reliable
        self.map.update(|ps| {
            for g in ps.iter_mut() {
                if g.origin == Origin::Split && g.rounds_optimized >= 1 {
                    g.reliable = true;
                }
            }
        });
        StepStatus::Optimized { batch, removed }
    }

    pub fn csv(&self) -> String {
        format_csv(&self.log)
    }
}
