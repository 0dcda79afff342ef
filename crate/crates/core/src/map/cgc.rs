//! Conditional Gaussian constraint: color-only primitives are re-anchored on
//! the nearest LiDAR-backed primitive by sampling their new mean from that
//! primitive's distribution and adopting its covariance.

use super::{GaussianMap, MapError};
use crate::gaussian::Origin;
use crate::geometry::Vec3;
use crate::kdtree::KdTree;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn split_seed(frame: u32, primitive: usize) -> u64 {
    // splitmix64 finalizer over the packed pair
    let mut z = ((frame as u64) << 40) ^ (primitive as u64) ^ 0x9E37_79B9_7F4A_7C15;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splits every listed unreliable primitive onto its nearest reliable anchor.
///
/// The new mean is drawn from N(μ_y, Σ_y) with an RNG seeded by
/// `(frame, primitive index)`; rotation and scales are copied from the
/// anchor while color and opacity are kept. Split primitives stay
/// unreliable until they survive a back-end round. Returns the indices that
/// were split; the primitive count never changes.
pub fn cgc_split(map: &mut GaussianMap, unreliable: &[usize], frame: u32) -> Result<Vec<usize>, MapError> {
    if unreliable.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(&bad) = unreliable.iter().find(|&&i| i >= map.len()) {
        return Err(MapError::BadIndex(bad));
    }
    let anchors: Vec<usize> =
        (0..map.len()).filter(|&i| map.primitives()[i].reliable && map.primitives()[i].origin != Origin::Skybox).collect();
    if anchors.is_empty() {
        return Err(MapError::NoReliableAnchor);
    }
    let tree = KdTree::with_ids(anchors.iter().map(|&i| map.primitives()[i].mean).collect(), anchors);
    let targets: Vec<usize> = unreliable
        .iter()
        .copied()
        .filter(|&i| {
            let g = &map.primitives()[i];
            !g.reliable && g.origin != Origin::Skybox
        })
        .collect();
    map.update(|prims| {
        for &i in &targets {
            let anchor_id = tree.nearest(&prims[i].mean).expect("anchor tree is nonempty").id;
            let anchor = prims[anchor_id].clone();
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(frame, i));
            let z = Vec3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            let offset = anchor.rotation_matrix() * z.component_mul(&anchor.scales());
            let g = &mut prims[i];
            g.mean = anchor.mean + offset;
            g.rotation = anchor.rotation;
            g.log_scales = anchor.log_scales;
            g.normal_flipped = anchor.normal_flipped;
            g.origin = Origin::Split;
            g.reliable = false;
        }
    });
    Ok(targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::GaussianPrimitive;

    fn color_prim(x: Vec3) -> GaussianPrimitive {
        let mut g = GaussianPrimitive::isotropic(x, 0.05, 0.3, Vec3::new(0.9, 0.1, 0.1));
        g.reliable = false;
        g.origin = Origin::Color;
        g
    }

    #[test]
    fn no_unreliable_means_no_work() {
        let mut map = GaussianMap::from_primitives(vec![GaussianPrimitive::isotropic(Vec3::zeros(), 1.0, 0.5, Vec3::zeros())]);
        assert!(cgc_split(&mut map, &[], 0).unwrap().is_empty());
    }

    #[test]
    fn missing_anchor_is_reported() {
        let mut map = GaussianMap::from_primitives(vec![color_prim(Vec3::zeros())]);
        assert_eq!(cgc_split(&mut map, &[0], 0), Err(MapError::NoReliableAnchor));
    }

    #[test]
    fn split_copies_anchor_shape_and_keeps_appearance() {
        let anchor = GaussianPrimitive::new(
            Vec3::new(1.0, 0.0, 0.0),
            nalgebra::UnitQuaternion::from_scaled_axis(Vec3::new(0.0, 0.3, 0.0)),
            Vec3::new(0.01, 0.2, 0.3),
            0.8,
            Vec3::repeat(0.2),
        );
        let far_anchor = GaussianPrimitive::isotropic(Vec3::new(10.0, 0.0, 0.0), 0.1, 0.8, Vec3::zeros());
        let mut map = GaussianMap::from_primitives(vec![anchor.clone(), far_anchor, color_prim(Vec3::new(1.5, 0.2, 0.0))]);
        let split = cgc_split(&mut map, &[2], 4).unwrap();
        assert_eq!(split, vec![2]);
        assert_eq!(map.len(), 3);
        let g = &map.primitives()[2];
        assert_eq!(g.log_scales, anchor.log_scales);
        assert_eq!(g.color, Vec3::new(0.9, 0.1, 0.1));
        assert_eq!(g.opacity, 0.3);
        assert_eq!(g.origin, Origin::Split);
        assert!(!g.reliable);
        // deterministic under the same seed
        let mut again = GaussianMap::from_primitives(vec![
            anchor,
            GaussianPrimitive::isotropic(Vec3::new(10.0, 0.0, 0.0), 0.1, 0.8, Vec3::zeros()),
            color_prim(Vec3::new(1.5, 0.2, 0.0)),
        ]);
        cgc_split(&mut again, &[2], 4).unwrap();
        assert_eq!(again.primitives()[2].mean, map.primitives()[2].mean);
    }

    #[test]
    fn skybox_is_never_an_anchor_or_target() {
        let mut sky = GaussianPrimitive::isotropic(Vec3::zeros(), 1.0, 0.5, Vec3::zeros());
        sky.origin = Origin::Skybox;
        sky.reliable = false;
        let mut map = GaussianMap::from_primitives(vec![sky, color_prim(Vec3::zeros())]);
        assert_eq!(cgc_split(&mut map, &[1], 0), Err(MapError::NoReliableAnchor));
    }

    fn anchor_stats(n: usize) -> (Vec3, crate::geometry::Mat3, f64, crate::geometry::Mat3, Vec3) {
        let anchor = GaussianPrimitive::new(
            Vec3::new(0.5, -1.0, 2.0),
            nalgebra::UnitQuaternion::from_scaled_axis(Vec3::new(0.4, -0.2, 0.9)),
            Vec3::new(0.05, 0.3, 0.6),
            0.8,
            Vec3::repeat(0.4),
        );
        let mut prims = vec![anchor.clone()];
        prims.extend((0..n).map(|i| color_prim(Vec3::new(0.5 + 1e-3 * (i % 7) as f64, -1.0, 2.0))));
        let mut map = GaussianMap::from_primitives(prims);
        let targets: Vec<usize> = (1..=n).collect();
        cgc_split(&mut map, &targets, 9).unwrap();
        let samples: Vec<Vec3> = map.primitives()[1..].iter().map(|g| g.mean).collect();
        let mean = samples.iter().sum::<Vec3>() / n as f64;
        let mut cov = crate::geometry::Mat3::zeros();
        for s in &samples {
            let d = s - mean;
            cov += d * d.transpose();
        }
        cov /= (n - 1) as f64;
        let precision = anchor.precision();
        let inside = samples
            .iter()
            .filter(|s| {
                let d = *s - anchor.mean;
                d.dot(&(precision * d)) < 11.345
            })
            .count() as f64
            / n as f64;
        (mean, cov, inside, anchor.covariance(), anchor.mean)
    }

    #[test]
    fn monte_carlo_moments_and_chi_squared() {
        let (mean, cov, inside, sigma, mu) = anchor_stats(10_000);
        assert!((mean - mu).norm() < 0.05);
        assert!((cov - sigma).norm() / sigma.norm() < 0.10);
        assert!(inside >= 0.985, "{inside}");
    }
}
