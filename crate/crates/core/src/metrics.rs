//! Trajectory error (ATE after rigid alignment, relative drift) and image
//! quality (PSNR, SSIM and a composite score).

use crate::geometry::{Mat3, PoseSE3, Vec3};
use crate::image::RgbImage;
use crate::trajectory::Stamped;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("only {matches} timestamps match between estimate and ground truth (need 2)")]
    InsufficientOverlap { matches: usize },
    #[error("image sizes differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrajectoryMetrics {
    pub ate_rmse: f64,
    /// Percent of segment length.
    pub t_rel: f64,
    /// Degrees per 100 m.
    pub r_rel: f64,
    pub matched: usize,
}

pub const SEGMENT_LENGTHS: [f64; 4] = [10.0, 20.0, 50.0, 100.0];
/// Timestamps closer than this are the same instant.
pub const MATCH_TOLERANCE: f64 = 1e-3;

/// Pairs poses with equal timestamps (within [`MATCH_TOLERANCE`]); both
/// lists may be in any order.
pub fn associate(estimate: &[Stamped], ground_truth: &[Stamped]) -> Vec<(PoseSE3, PoseSE3)> {
    let mut gt: Vec<&Stamped> = ground_truth.iter().collect();
    gt.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let mut est: Vec<&Stamped> = estimate.iter().collect();
    est.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let mut out = Vec::new();
    let mut j = 0;
    for e in est {
        while j < gt.len() && gt[j].timestamp < e.timestamp - MATCH_TOLERANCE {
            j += 1;
        }
        if j < gt.len() && (gt[j].timestamp - e.timestamp).abs() <= MATCH_TOLERANCE {
            out.push((e.pose, gt[j].pose));
            j += 1;
        }
    }
    out
}

/// Rotation and translation minimizing `Σ |R·src + t − dst|²`.
pub fn umeyama_rigid(src: &[Vec3], dst: &[Vec3]) -> PoseSE3 {
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vec3>() / n;
    let md = dst.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - md) * (s - ms).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut s = Mat3::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    PoseSE3::from_matrix_parts(&r, md - r * ms)
}

/// ATE RMSE after aligning the estimate onto the ground truth.
pub fn ate_rmse(pairs: &[(PoseSE3, PoseSE3)]) -> f64 {
    let src: Vec<Vec3> = pairs.iter().map(|(e, _)| e.translation).collect();
    let dst: Vec<Vec3> = pairs.iter().map(|(_, g)| g.translation).collect();
    let align = umeyama_rigid(&src, &dst);
    let sq: f64 = src.iter().zip(&dst).map(|(s, d)| (align.transform_point(s) - d).norm_squared()).sum();
    (sq / src.len() as f64).sqrt()
}

/// Relative errors over sub-trajectories of fixed ground-truth path length,
/// averaged over all start points and all lengths that fit. Paths shorter
/// than the shortest length use 10/20/50/100 % of their own length instead.
pub fn relative_errors(pairs: &[(PoseSE3, PoseSE3)]) -> (f64, f64) {
    let mut dist = vec![0.0];
    for w in pairs.windows(2) {
        let step = (w[1].1.translation - w[0].1.translation).norm();
        dist.push(dist.last().unwrap() + step);
    }
    let total = *dist.last().unwrap();
    if total <= 0.0 {
        return (0.0, 0.0);
    }
    let lengths: Vec<f64> = if total >= SEGMENT_LENGTHS[0] {
        SEGMENT_LENGTHS.iter().copied().filter(|&l| l <= total + 1e-9).collect()
    } else {
        SEGMENT_LENGTHS.iter().map(|l| l / 100.0 * total).collect()
    };
    let (mut t_sum, mut r_sum, mut count) = (0.0, 0.0, 0usize);
    for &len in &lengths {
        let (mut t_len, mut r_len, mut n_len) = (0.0, 0.0, 0usize);
        for i in 0..pairs.len() {
            let Some(j) = (i + 1..pairs.len()).find(|&j| dist[j] - dist[i] >= len - 1e-9) else { break };
            let gt_rel = pairs[i].1.inverse().compose(&pairs[j].1);
            let est_rel = pairs[i].0.inverse().compose(&pairs[j].0);
            let err = gt_rel.inverse().compose(&est_rel);
            t_len += err.translation.norm() / len * 100.0;
            r_len += err.rotation_angle().to_degrees() / len * 100.0;
            n_len += 1;
        }
        if n_len > 0 {
            t_sum += t_len / n_len as f64;
            r_sum += r_len / n_len as f64;
            count += 1;
        }
    }
    if count == 0 {
        (0.0, 0.0)
    } else {
        (t_sum / count as f64, r_sum / count as f64)
    }
}

pub fn evaluate_trajectory(estimate: &[Stamped], ground_truth: &[Stamped]) -> Result<TrajectoryMetrics, MetricsError> {
    let pairs = associate(estimate, ground_truth);
    if pairs.len() < 2 {
        return Err(MetricsError::InsufficientOverlap { matches: pairs.len() });
    }
    let (t_rel, r_rel) = relative_errors(&pairs);
    Ok(TrajectoryMetrics { ate_rmse: ate_rmse(&pairs), t_rel, r_rel, matched: pairs.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub ssim: f64,
    pub psnr: f64,
    pub lpips: f64,
    pub composite: f64,
}

pub const PSNR_CAP: f64 = 99.0;

fn check_dims(a: &RgbImage, b: &RgbImage) -> Result<(), MetricsError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(MetricsError::DimensionMismatch { a: (a.width, a.height), b: (b.width, b.height) })
    }
}

/// `10·log10(1 / MSE)` over all pixel channels, at most [`PSNR_CAP`].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let se: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).norm_squared()).sum();
    let mse = se / (3 * a.data.len()) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut w = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, t) in w.iter_mut().enumerate() {
        let x = i as f64 - SSIM_RADIUS as f64;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|t| t / s)
}

/// Separable Gaussian filter evaluated only where the window fits.
fn filter_valid(img: &[f64], width: usize, height: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ow, oh) = (width + 1 - k, height + 1 - k);
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * img[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), C1 = 0.01², C2 = 0.03²,
/// population statistics, averaged over the valid region and the channels.
/// Images smaller than the window fall back to a single global window.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (w, h) = (a.width, a.height);
    let global = w < 2 * SSIM_RADIUS + 1 || h < 2 * SSIM_RADIUS + 1;
    let taps = gaussian_taps();
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.data.iter().map(|p| p[c]).collect();
        let y: Vec<f64> = b.data.iter().map(|p| p[c]).collect();
        let products = [
            x.clone(),
            y.clone(),
            x.iter().map(|v| v * v).collect::<Vec<_>>(),
            y.iter().map(|v| v * v).collect(),
            x.iter().zip(&y).map(|(u, v)| u * v).collect(),
        ];
        let f: Vec<Vec<f64>> = if global {
            products.iter().map(|p| vec![p.iter().sum::<f64>() / p.len() as f64]).collect()
        } else {
            products.iter().map(|p| filter_valid(p, w, h, &taps).0).collect()
        };
        let n = f[0].len();
        let mut s = 0.0;
        for i in 0..n {
            let (mx, my) = (f[0][i], f[1][i]);
            let vx = f[2][i] - mx * mx;
            let vy = f[3][i] - my * my;
            let cxy = f[4][i] - mx * my;
            s += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += s / n as f64;
    }
    Ok(total / 3.0)
}

/// Composite image score with a pluggable perceptual distance.
pub fn image_metrics_with(
    rendered: &RgbImage,
    target: &RgbImage,
    lpips: &dyn Fn(&RgbImage, &RgbImage) -> f64,
) -> Result<ImageMetrics, MetricsError> {
    let s = ssim(rendered, target)?;
    let p = psnr(rendered, target)?;
    let l = lpips(rendered, target);
    Ok(ImageMetrics { ssim: s, psnr: p, lpips: l, composite: s + p / 30.0 + (1.0 - l) })
}

/// As [`image_metrics_with`] with the perceptual term fixed at 0.
pub fn image_metrics(rendered: &RgbImage, target: &RgbImage) -> Result<ImageMetrics, MetricsError> {
    image_metrics_with(rendered, target, &|_, _| 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec6;
    use crate::image::Grid;

    fn pattern(w: usize, h: usize, dx: usize, dy: usize) -> RgbImage {
        let mut img = Grid::filled(w, h, Vec3::zeros());
        for y in 0..h {
            for x in 0..w {
                let p = img.get_mut(x, y);
                for c in 0..3 {
                    let (xx, yy) = ((x + dx) as f64, (y + dy) as f64);
                    let cf = c as f64;
                    let hash = (((x + dx) * 7 + (y + dy) * 13 + c * 5) % 11) as f64;
                    let v = 0.5 + 0.35 * (0.37 * xx + 0.9 * cf).sin() * (0.23 * yy - 0.4 * cf).cos() + 0.1 * hash / 11.0 - 0.05;
                    p[c] = v.clamp(0.0, 1.0);
                }
            }
        }
        img
    }

    #[test]
    fn ssim_matches_reference_implementation() {
        // reference: skimage structural_similarity(gaussian_weights, sigma 1.5,
        // population covariance, data_range 1, per channel)
        let a = pattern(32, 24, 0, 0);
        let b = pattern(32, 24, 2, 1);
        assert!((ssim(&a, &b).unwrap() - 0.5814329371539282).abs() < 1e-4);
        assert!((psnr(&a, &b).unwrap() - 17.048045084145382).abs() < 1e-9);
        let mut c = a.clone();
        for p in &mut c.data {
            *p = *p * 0.8 + Vec3::repeat(0.1);
        }
        assert!((ssim(&a, &c).unwrap() - 0.9743443518739815).abs() < 1e-4);
        assert!((psnr(&a, &c).unwrap() - 28.8816551569301).abs() < 1e-9);
    }

    #[test]
    fn identical_images_are_perfect() {
        let a = pattern(20, 16, 0, 0);
        let m = image_metrics(&a, &a).unwrap();
        assert!((m.ssim - 1.0).abs() < 1e-12);
        assert_eq!(m.psnr, PSNR_CAP);
        assert!((m.composite - (m.ssim + 99.0 / 30.0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn uniform_offset_gives_twenty_db() {
        let a = Grid::filled(8, 8, Vec3::repeat(0.5));
        let b = Grid::filled(8, 8, Vec3::repeat(0.6));
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_symmetric() {
        let a = pattern(24, 20, 0, 0);
        let b = pattern(24, 20, 1, 3);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let a = Grid::filled(8, 8, Vec3::zeros());
        let b = Grid::filled(8, 9, Vec3::zeros());
        assert_eq!(ssim(&a, &b).unwrap_err(), MetricsError::DimensionMismatch { a: (8, 8), b: (8, 9) });
    }

    #[test]
    fn lpips_plugin_enters_the_composite() {
        let a = pattern(16, 16, 0, 0);
        let m = image_metrics_with(&a, &a, &|_, _| 0.25).unwrap();
        assert!((m.composite - (1.0 + 3.3 + 0.75)).abs() < 1e-12);
    }

    fn straight(n: usize, step: f64) -> Vec<Stamped> {
        (0..n)
            .map(|k| {
                let k = k as f64;
                let rot = nalgebra::UnitQuaternion::from_euler_angles(0.0, 0.0, 0.02 * (k * 0.3).sin());
                Stamped { timestamp: k * 0.1, pose: PoseSE3::new(rot, Vec3::new(k * step, (k * 0.2).sin(), 0.1 * k * step)) }
            })
            .collect()
    }

    #[test]
    fn self_comparison_is_all_zero() {
        let gt = straight(50, 0.5);
        let m = evaluate_trajectory(&gt, &gt).unwrap();
        assert!(m.ate_rmse < 1e-12 && m.t_rel < 1e-12 && m.r_rel < 1e-12, "{m:?}");
    }

    #[test]
    fn rigid_offset_vanishes_after_alignment() {
        let gt = straight(60, 0.4);
        let g = PoseSE3::exp(&Vec6::new(3.0, -2.0, 1.0, 0.3, -0.5, 1.1));
        let est: Vec<Stamped> = gt.iter().map(|s| Stamped { timestamp: s.timestamp, pose: g.compose(&s.pose) }).collect();
        let m = evaluate_trajectory(&est, &gt).unwrap();
        assert!(m.ate_rmse < 1e-9, "{m:?}");
        assert!(m.t_rel < 1e-9 && m.r_rel < 1e-9);
    }

    #[test]
    fn one_percent_drift_reads_as_one_percent() {
        // 100 m straight path with the estimate running 1 % long
        let gt: Vec<Stamped> = (0..=200)
            .map(|k| Stamped { timestamp: k as f64, pose: PoseSE3::from_translation(Vec3::new(0.5 * k as f64, 0.0, 0.0)) })
            .collect();
        let est: Vec<Stamped> =
            gt.iter().map(|s| Stamped { timestamp: s.timestamp, pose: PoseSE3::from_translation(s.pose.translation * 1.01) }).collect();
        let m = evaluate_trajectory(&est, &gt).unwrap();
        assert!((m.t_rel - 1.0).abs() < 0.1, "{m:?}");
        assert!(m.r_rel < 1e-9);
    }

    #[test]
    fn short_paths_use_fractional_segments() {
        let gt = straight(30, 0.1);
        let est: Vec<Stamped> = gt
            .iter()
            .map(|s| {
                let mut p = s.pose;
                p.translation.x *= 1.02;
                Stamped { timestamp: s.timestamp, pose: p }
            })
            .collect();
        let m = evaluate_trajectory(&est, &gt).unwrap();
        assert!(m.t_rel > 0.5 && m.t_rel < 3.0, "{m:?}");
    }

    #[test]
    fn disjoint_timestamps_are_rejected() {
        let gt = straight(5, 1.0);
        let est: Vec<Stamped> = gt.iter().map(|s| Stamped { timestamp: s.timestamp + 50.0, pose: s.pose }).collect();
        assert_eq!(evaluate_trajectory(&est, &gt).unwrap_err(), MetricsError::InsufficientOverlap { matches: 0 });
    }
}
