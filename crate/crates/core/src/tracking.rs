//! Front-end: density-weighted point-to-plane registration of a LiDAR sweep
//! against the sliding-window submap, co-visibility and keyframe selection.
//!
//! Poses estimated here are camera-to-world. The sweep is moved into the
//! camera frame through the extrinsics before registration.

use crate::camera::CameraModel;
use crate::geometry::{Mat3, PoseSE3, Vec3, Vec6};
use crate::kdtree::KdTree;
use crate::map::{default_radius, weights_for, DensityMode, GaussianMap};
use crate::sensor::{Frame, PointCloud};
use nalgebra::{Matrix6, SymmetricEigen};
use rayon::prelude::*;
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TrackingError {
    #[error("submap is empty")]
    EmptySubmap,
    #[error("no point found a primitive within the association distance")]
    NoCorrespondences,
    #[error("tracking lost: {reason} ({inliers} inliers)")]
    TrackingLost { inliers: usize, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub point: usize,
    pub primitive: usize,
    /// Signed point-to-plane distance along the point's world normal.
    pub residual: f64,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackingResult {
    pub pose: PoseSE3,
    pub iterations: usize,
    pub final_cost: f64,
    pub inlier_count: usize,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackingParams {
    pub max_iterations: usize,
    /// Stop once the update norm drops below this.
    pub tolerance: f64,
    pub max_dist: f64,
    /// Iteration after which the association distance is scaled by `shrink`.
    pub shrink_after: usize,
    pub shrink: f64,
    pub min_inliers: usize,
    pub lambda_r: f64,
    pub huber: bool,
    pub density_mode: DensityMode,
}

impl Default for TrackingParams {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            tolerance: 1e-5,
            max_dist: 1.0,
            shrink_after: 10,
            shrink: 0.5,
            min_inliers: 50,
            lambda_r: 0.1,
            huber: true,
            density_mode: DensityMode::Exact,
        }
    }
}

/// Read-only tracking view of a map: the non-sky submap primitives, a
/// k-d tree over their means and their weights W.
#[derive(Clone, Debug)]
pub struct Submap {
    tree: KdTree,
    means: Vec<Vec3>,
    normals: Vec<Vec3>,
    weights: Vec<f64>,
    indices: Vec<usize>,
}

impl Submap {
    pub fn build(map: &GaussianMap, mode: DensityMode) -> Self {
        let indices = map.tracking_submap();
        let radius = default_radius(map, &indices);
        let weights = match radius {
            Some(r) => weights_for(map, &indices, r, mode),
            None => indices.iter().map(|&i| map.primitives()[i].opacity).collect(),
        };
        Self::from_parts(map, indices, weights)
    }

    /// Submap with every weight set to one.
    pub fn unweighted(map: &GaussianMap) -> Self {
        let indices = map.tracking_submap();
        let weights = vec![1.0; indices.len()];
        Self::from_parts(map, indices, weights)
    }

    fn from_parts(map: &GaussianMap, indices: Vec<usize>, weights: Vec<f64>) -> Self {
        let means: Vec<Vec3> = indices.iter().map(|&i| map.primitives()[i].mean).collect();
        let normals = indices.iter().map(|&i| map.primitives()[i].normal()).collect();
        let tree = KdTree::with_ids(means.clone(), (0..indices.len()).collect());
        Self { tree, means, normals, weights, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Map index of submap entry `k`.
    pub fn map_index(&self, k: usize) -> usize {
        self.indices[k]
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }
}

/// One residual term in the sensor frame, ready for cost evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairTerm {
    pub point: Vec3,
    pub point_normal: Vec3,
    pub mean: Vec3,
    pub gaussian_normal: Vec3,
    pub weight: f64,
}

/// Pairs every oriented point of a world-frame cloud with its nearest submap
/// primitive. Submap entries are ordered by map index, so ties resolve to
/// the lowest primitive index. `primitive` in the result is a map index.
pub fn associate(cloud_world: &PointCloud, submap: &Submap, max_dist: f64) -> Result<Vec<Correspondence>, TrackingError> {
    if submap.is_empty() {
        return Err(TrackingError::EmptySubmap);
    }
    let points: Vec<(usize, Vec3, Vec3)> = cloud_world.oriented_points().collect();
    let max2 = max_dist * max_dist;
    let out: Vec<Correspondence> = points
        .par_iter()
        .filter_map(|&(i, p, n)| {
            let nb = submap.tree.nearest(&p)?;
            (nb.dist2 <= max2).then(|| Correspondence {
                point: i,
                primitive: submap.indices[nb.id],
                residual: n.dot(&(p - submap.means[nb.id])),
                weight: submap.weights[nb.id],
            })
        })
        .collect();
    if out.is_empty() {
        return Err(TrackingError::NoCorrespondences);
    }
    Ok(out)
}

fn associate_terms(cloud: &PointCloud, submap: &Submap, pose: &PoseSE3, max_dist: f64) -> Vec<PairTerm> {
    let points: Vec<(usize, Vec3, Vec3)> = cloud.oriented_points().collect();
    let max2 = max_dist * max_dist;
    points
        .par_iter()
        .filter_map(|&(_, p, n)| {
            let nb = submap.tree.nearest(&pose.transform_point(&p))?;
            (nb.dist2 <= max2).then(|| PairTerm {
                point: p,
                point_normal: n,
                mean: submap.means[nb.id],
                gaussian_normal: submap.normals[nb.id],
                weight: submap.weights[nb.id],
            })
        })
        .collect()
}

/// Sensor-frame terms for correspondences found on `cloud` (sensor frame).
pub fn pair_terms(correspondences: &[Correspondence], cloud: &PointCloud, map: &GaussianMap) -> Vec<PairTerm> {
    let normals = cloud.normals.as_deref().unwrap_or(&[]);
    correspondences
        .iter()
        .filter_map(|c| {
            let n = normals.get(c.point).copied().flatten()?;
            let g = &map.primitives()[c.primitive];
            Some(PairTerm {
                point: cloud.points[c.point],
                point_normal: n,
                mean: g.mean,
                gaussian_normal: g.normal(),
                weight: c.weight,
            })
        })
        .collect()
}

/// E = Σ W (R n_p · (R p + t − μ))² + λ_R Σ |1 − R n_p · n_g|.
pub fn tracking_cost(terms: &[PairTerm], pose: &PoseSE3, lambda_r: f64) -> f64 {
    terms
        .iter()
        .map(|t| {
            let nw = pose.rotate(&t.point_normal);
            let r = nw.dot(&(pose.transform_point(&t.point) - t.mean));
            t.weight * r * r + lambda_r * (1.0 - nw.dot(&t.gaussian_normal)).abs()
        })
        .sum()
}

/// Cost and its gradient with respect to a right perturbation `T · exp(δ)`.
pub fn tracking_cost_gradient(terms: &[PairTerm], pose: &PoseSE3, lambda_r: f64) -> (f64, Vec6) {
    let rt = pose.rotation.inverse();
    let mut cost = 0.0;
    let mut grad = Vec6::zeros();
    for t in terms {
        let n = t.point_normal;
        let a = rt * (pose.translation - t.mean);
        let r = n.dot(&(t.point + a));
        let b = rt * t.gaussian_normal;
        let c = n.dot(&b);
        cost += t.weight * r * r + lambda_r * (1.0 - c).abs();
        let j_rot = n.cross(&a);
        let s = 2.0 * t.weight * r;
        let sign = if 1.0 - c >= 0.0 { 1.0 } else { -1.0 };
        let g_rot = s * j_rot - lambda_r * sign * n.cross(&b);
        for k in 0..3 {
            grad[k] += s * n[k];
            grad[k + 3] += g_rot[k];
        }
    }
    (cost, grad)
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values[values.len() / 2]
}

/// Gauss-Newton registration of `cloud` (camera frame, with normals)
/// against a prepared submap.
pub fn register(
    cloud: &PointCloud,
    submap: &Submap,
    initial_pose: &PoseSE3,
    params: &TrackingParams,
) -> Result<TrackingResult, TrackingError> {
    if submap.is_empty() {
        return Err(TrackingError::EmptySubmap);
    }
    let mut pose = *initial_pose;
    let mut converged = false;
    let mut iterations = 0;
    let mut terms = Vec::new();
    for iter in 0..params.max_iterations {
        iterations = iter + 1;
        let max_dist = if iter >= params.shrink_after { params.max_dist * params.shrink } else { params.max_dist };
        terms = associate_terms(cloud, submap, &pose, max_dist);
        if terms.len() < params.min_inliers {
            return Err(TrackingError::TrackingLost { inliers: terms.len(), reason: "too few inliers".into() });
        }
        let rt = pose.rotation.inverse();
        let residuals: Vec<f64> =
            terms.iter().map(|t| t.point_normal.dot(&(t.point + rt * (pose.translation - t.mean)))).collect();
        let delta_h = if params.huber {
            let mut abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
            3.0 * median(&mut abs)
        } else {
            f64::INFINITY
        };
        let mut h = Matrix6::zeros();
        let mut g = Vec6::zeros();
        for (t, &r) in terms.iter().zip(&residuals) {
            let n = t.point_normal;
            let a = rt * (pose.translation - t.mean);
            let j = Vec6::new(n.x, n.y, n.z, 0.0, 0.0, 0.0) + {
                let c = n.cross(&a);
                Vec6::new(0.0, 0.0, 0.0, c.x, c.y, c.z)
            };
            let robust = if r.abs() <= delta_h || delta_h <= 1e-12 { 1.0 } else { delta_h / r.abs() };
            let w = t.weight * robust;
            h += w * j * j.transpose();
            g += w * r * j;
            if params.lambda_r > 0.0 {
                // ½‖R n_p − n_g‖² = 1 − n_p·n_g for unit normals
                let e = n - rt * t.gaussian_normal;
                let je = -crate::geometry::skew(&n);
                let hr: Mat3 = je.transpose() * je;
                let gr = je.transpose() * e;
                let lam = 0.5 * params.lambda_r;
                for x in 0..3 {
                    g[x + 3] += lam * gr[x];
                    for y in 0..3 {
                        h[(x + 3, y + 3)] += lam * hr[(x, y)];
                    }
                }
            }
        }
        let eig = SymmetricEigen::new(h);
        let max_e = eig.eigenvalues.max();
        let min_e = eig.eigenvalues.min();
        if !(max_e > 0.0) || min_e / max_e < 1e-10 {
            return Err(TrackingError::TrackingLost { inliers: terms.len(), reason: "rank-deficient system".into() });
        }
        let Some(chol) = h.cholesky() else {
            return Err(TrackingError::TrackingLost { inliers: terms.len(), reason: "rank-deficient system".into() });
        };
        let step = -chol.solve(&g);
        pose = pose.retract(&step);
        if step.norm() < params.tolerance {
            converged = true;
            break;
        }
    }
    let final_cost = tracking_cost(&terms, &pose, params.lambda_r);
    Ok(TrackingResult { pose, iterations, final_cost, inlier_count: terms.len(), converged })
}

/// Tracks one frame against the map's submap, starting at `initial_pose`
/// (the previous pose under the constant-position model).
pub fn track_frame(
    frame: &Frame,
    map: &GaussianMap,
    initial_pose: &PoseSE3,
    cam: &CameraModel,
    params: &TrackingParams,
) -> Result<TrackingResult, TrackingError> {
    let submap = Submap::build(map, params.density_mode);
    let cloud = frame.cloud.transformed(&cam.lidar_to_camera);
    register(&cloud, &submap, initial_pose, params)
}

fn visible_set(map: &GaussianMap, indices: &[usize], pose: &PoseSE3, cam: &CameraModel) -> HashSet<usize> {
    let inv = pose.inverse();
    indices.iter().copied().filter(|&i| cam.sees(&inv.transform_point(&map.primitives()[i].mean))).collect()
}

/// Intersection over union of the submap primitives visible from two camera
/// poses. Both sets empty counts as full overlap.
pub fn covisibility(map: &GaussianMap, pose_a: &PoseSE3, pose_b: &PoseSE3, cam: &CameraModel) -> f64 {
    let indices = map.tracking_submap();
    let a = visible_set(map, &indices, pose_a, cam);
    let b = visible_set(map, &indices, pose_b, cam);
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

pub fn keyframe_decision(covis: f64, threshold: f64) -> bool {
    covis < threshold
}
