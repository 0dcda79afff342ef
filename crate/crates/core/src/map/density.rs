//! Local density of Gaussians and the normal-consistency weight used to
//! rank map primitives during tracking.
//!
//! The density evaluates each neighbor with a reconstructed covariance Σ′
//! whose along-normal eigenvalue is 1 and whose tangential eigenvalues are
//! the ratios σ_perp/σ_along. The fast mode replaces the quadratic form with
//! `(σ_perp1 σ_perp2 / σ_along²) ⟨x − μ, n⟩²`. That coefficient does not
//! reduce to the Σ′ quadratic form (whose along-normal eigenvalue is 1), so
//! the two modes differ by more than an approximation error; exact is the
//! default.

use super::GaussianMap;
use crate::gaussian::GaussianPrimitive;
use crate::geometry::{Mat3, Vec3};
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DensityMode {
    #[default]
    Exact,
    Fast,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityQuery {
    pub point: Vec3,
    pub radius: f64,
}

impl DensityQuery {
    pub fn new(point: Vec3, radius: f64) -> Self {
        assert!(radius > 0.0, "density radius must be positive");
        Self { point, radius }
    }
}

/// Eigen-axes ordered `(normal, perp1, perp2)` with their scales.
fn ordered_axes(g: &GaussianPrimitive) -> ([Vec3; 3], [f64; 3]) {
    let r = g.rotation_matrix();
    let a = g.normal_axis();
    let others: Vec<usize> = (0..3).filter(|&k| k != a).collect();
    let s = g.scales();
    (
        [g.normal(), r.column(others[0]).into_owned(), r.column(others[1]).into_owned()],
        [s[a], s[others[0]], s[others[1]]],
    )
}

/// Σ′ = D diag(1, σ_perp1/σ_along, σ_perp2/σ_along) Dᵀ, D's first column the normal.
pub fn reconstruct_covariance(g: &GaussianPrimitive) -> Mat3 {
    let (axes, s) = ordered_axes(g);
    let d = Mat3::from_columns(&axes);
    let diag = Vec3::new(1.0, s[1] / s[0], s[2] / s[0]);
    let m = d * Mat3::from_diagonal(&diag) * d.transpose();
    0.5 * (m + m.transpose())
}

/// (x−μ)ᵀ Σ′⁻¹ (x−μ), evaluated in the eigenbasis.
fn exact_quadratic(g: &GaussianPrimitive, x: &Vec3) -> f64 {
    let (axes, s) = ordered_axes(g);
    let d = x - g.mean;
    let c = [d.dot(&axes[0]), d.dot(&axes[1]), d.dot(&axes[2])];
    c[0] * c[0] + c[1] * c[1] * s[0] / s[1] + c[2] * c[2] * s[0] / s[2]
}

/// The simplified quadratic form used in fast mode.
pub fn fast_quadratic(g: &GaussianPrimitive, x: &Vec3) -> f64 {
    let (axes, s) = ordered_axes(g);
    let along = (x - g.mean).dot(&axes[0]);
    s[1] * s[2] / (s[0] * s[0]) * along * along
}

fn kernel(g: &GaussianPrimitive, x: &Vec3, mode: DensityMode) -> f64 {
    let q = match mode {
        DensityMode::Exact => exact_quadratic(g, x),
        DensityMode::Fast => fast_quadratic(g, x),
    };
    g.opacity * (-0.5 * q).exp()
}

/// ρ(x) = Σ_{‖μ_i − x‖ ≤ r} α_i exp(−½ q_i(x)).
pub fn density(map: &GaussianMap, query: &DensityQuery, mode: DensityMode) -> f64 {
    map.within_radius(&query.point, query.radius)
        .iter()
        .map(|n| kernel(&map.primitives()[n.id], &query.point, mode))
        .sum()
}

/// W = max(0, C · ρ(μ)) with C = n · n̄, n̄ the normalized average of the
/// neighbors' normals (self excluded), each sign-aligned to n first.
/// An isolated primitive gets C = 1.
pub fn weight(map: &GaussianMap, index: usize, radius: f64, mode: DensityMode) -> f64 {
    let g = &map.primitives()[index];
    let n = g.normal();
    let neighbors = map.within_radius(&g.mean, radius);
    let mut rho = 0.0;
    let mut sum = Vec3::zeros();
    let mut others = 0;
    for nb in &neighbors {
        let h = &map.primitives()[nb.id];
        rho += kernel(h, &g.mean, mode);
        if nb.id != index {
            let hn = h.normal();
            sum += if hn.dot(&n) < 0.0 { -hn } else { hn };
            others += 1;
        }
    }
    let consistency = if others == 0 {
        1.0
    } else {
        match sum.try_normalize(1e-300) {
            Some(avg) => n.dot(&avg),
            None => 0.0,
        }
    };
    (consistency * rho).max(0.0)
}

/// Weights for many primitives in parallel.
pub fn weights_for(map: &GaussianMap, indices: &[usize], radius: f64, mode: DensityMode) -> Vec<f64> {
    indices.par_iter().map(|&i| weight(map, i, radius, mode)).collect()
}

/// Three times the median nearest-neighbor spacing among the given primitives.
pub fn default_radius(map: &GaussianMap, indices: &[usize]) -> Option<f64> {
    if indices.len() < 2 {
        return None;
    }
    let points: Vec<Vec3> = indices.iter().map(|&i| map.primitives()[i].mean).collect();
    let tree = crate::kdtree::KdTree::new(points.clone());
    let mut spacing: Vec<f64> = points
        .par_iter()
        .map(|p| tree.knn(p, 2).get(1).map_or(0.0, |n| n.dist2.sqrt()))
        .collect();
    spacing.sort_by(f64::total_cmp);
    let median = spacing[spacing.len() / 2];
    (median > 0.0).then_some(3.0 * median)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{SymmetricEigen, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_primitive(rng: &mut ChaCha8Rng, spread: f64) -> GaussianPrimitive {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rot = UnitQuaternion::from_scaled_axis(axis * 2.0);
        let scales = Vec3::new(rng.random_range(0.02..0.5), rng.random_range(0.02..0.5), rng.random_range(0.02..0.5));
        let mean = Vec3::new(
            rng.random_range(-spread..spread),
            rng.random_range(-spread..spread),
            rng.random_range(-spread..spread),
        );
        GaussianPrimitive::new(mean, rot, scales, rng.random_range(0.1..1.0), Vec3::repeat(0.5))
    }

    #[test]
    fn isotropic_reconstruction_is_identity() {
        let g = GaussianPrimitive::isotropic(Vec3::zeros(), 0.3, 0.5, Vec3::zeros());
        assert!((reconstruct_covariance(&g) - Mat3::identity()).norm() < 1e-12);
    }

    #[test]
    fn axis_aligned_reconstruction() {
        let g = GaussianPrimitive::new(Vec3::zeros(), UnitQuaternion::identity(), Vec3::new(0.1, 1.0, 2.0), 0.5, Vec3::zeros());
        let want = Mat3::from_diagonal(&Vec3::new(1.0, 10.0, 20.0));
        assert!((reconstruct_covariance(&g) - want).norm() < 1e-9);
    }

    #[test]
    fn reconstruction_keeps_unit_normal_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let g = random_primitive(&mut rng, 1.0);
            let eig = SymmetricEigen::new(reconstruct_covariance(&g));
            let imin = eig.eigenvalues.imin();
            assert!((eig.eigenvalues[imin] - 1.0).abs() < 1e-9);
            let v = eig.eigenvectors.column(imin).into_owned();
            assert!(v.dot(&g.normal()).abs().min(1.0).acos() < 1e-6);
        }
    }

    #[test]
    fn single_primitive_density_at_mean_is_opacity() {
        let mut g = GaussianPrimitive::isotropic(Vec3::new(1.0, 2.0, 3.0), 0.2, 0.7, Vec3::zeros());
        g.opacity = 0.7;
        let map = GaussianMap::from_primitives(vec![g.clone()]);
        let q = DensityQuery::new(g.mean, 0.5);
        assert_eq!(density(&map, &q, DensityMode::Exact), 0.7);
        assert_eq!(density(&map, &q, DensityMode::Fast), 0.7);
    }

    #[test]
    fn coincident_primitives_add() {
        let g = GaussianPrimitive::isotropic(Vec3::zeros(), 0.2, 0.5, Vec3::zeros());
        let map = GaussianMap::from_primitives(vec![g.clone(), g]);
        assert_eq!(density(&map, &DensityQuery::new(Vec3::zeros(), 1.0), DensityMode::Exact), 1.0);
    }

    #[test]
    fn empty_neighborhood_has_zero_density() {
        let g = GaussianPrimitive::isotropic(Vec3::zeros(), 0.2, 0.5, Vec3::zeros());
        let map = GaussianMap::from_primitives(vec![g]);
        assert_eq!(density(&map, &DensityQuery::new(Vec3::new(5.0, 0.0, 0.0), 1.0), DensityMode::Exact), 0.0);
    }

    #[test]
    fn fast_mode_matches_printed_formula() {
        let g = GaussianPrimitive::new(Vec3::zeros(), UnitQuaternion::identity(), Vec3::new(0.1, 1.0, 2.0), 0.5, Vec3::zeros());
        let x = Vec3::new(0.3, 0.4, -0.2);
        assert!((fast_quadratic(&g, &x) - 200.0 * 0.09).abs() < 1e-9);
    }

    #[test]
    fn density_is_monotone_under_insertion() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut prims: Vec<GaussianPrimitive> = (0..20).map(|_| random_primitive(&mut rng, 1.0)).collect();
        let x = Vec3::new(0.1, 0.0, -0.1);
        let q = DensityQuery::new(x, 1.0);
        let mut last = density(&GaussianMap::from_primitives(prims.clone()), &q, DensityMode::Exact);
        for _ in 0..10 {
            let mut g = random_primitive(&mut rng, 0.5);
            g.mean = x + (g.mean - x) * 0.5;
            prims.push(g);
            let now = density(&GaussianMap::from_primitives(prims.clone()), &q, DensityMode::Exact);
            assert!(now >= last);
            last = now;
        }
    }

    fn planar(mean: Vec3, normal: Vec3) -> GaussianPrimitive {
        let basis = crate::gaussian::basis_from_normal(&normal);
        GaussianPrimitive::new(mean, crate::gaussian::rotation_from_matrix(&basis), Vec3::new(0.01, 0.1, 0.1), 0.5, Vec3::zeros())
    }

    #[test]
    fn coplanar_cluster_has_full_consistency() {
        let prims: Vec<_> =
            (0..9).map(|i| planar(Vec3::new((i % 3) as f64 * 0.1, (i / 3) as f64 * 0.1, 0.0), Vec3::z())).collect();
        let map = GaussianMap::from_primitives(prims);
        let w = weight(&map, 4, 0.5, DensityMode::Exact);
        let rho = density(&map, &DensityQuery::new(map.primitives()[4].mean, 0.5), DensityMode::Exact);
        assert!((w - rho).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_normal_gets_zero_weight() {
        let mut prims: Vec<_> = (0..8).map(|i| planar(Vec3::new(i as f64 * 0.05, 0.0, 0.0), Vec3::z())).collect();
        prims.push(planar(Vec3::new(0.2, 0.05, 0.0), Vec3::x()));
        let map = GaussianMap::from_primitives(prims);
        assert!(weight(&map, 8, 0.5, DensityMode::Exact).abs() < 1e-12);
    }

    #[test]
    fn isolated_primitive_weight_is_opacity() {
        let map = GaussianMap::from_primitives(vec![planar(Vec3::zeros(), Vec3::z())]);
        assert_eq!(weight(&map, 0, 0.5, DensityMode::Exact), 0.5);
    }

    #[test]
    fn plane_outweighs_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut prims = Vec::new();
        for i in 0..50 {
            let x = (i % 10) as f64 * 0.1 + rng.random_range(-0.01..0.01);
            let y = (i / 10) as f64 * 0.1 + rng.random_range(-0.01..0.01);
            prims.push(planar(Vec3::new(x, y, 0.0), Vec3::z()));
        }
        for _ in 0..5 {
            let n = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let p = Vec3::new(rng.random_range(0.0..0.9), rng.random_range(0.0..0.4), rng.random_range(0.2..0.4));
            prims.push(planar(p, n));
        }
        let map = GaussianMap::from_primitives(prims);
        let r = default_radius(&map, &(0..55).collect::<Vec<_>>()).unwrap();
        let w = weights_for(&map, &(0..55).collect::<Vec<_>>(), r, DensityMode::Exact);
        let plane = w[..50].iter().sum::<f64>() / 50.0;
        let outliers = w[50..].iter().sum::<f64>() / 5.0;
        assert!(plane > 3.0 * outliers, "plane {plane} outliers {outliers}");
    }
}
