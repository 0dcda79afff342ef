use super::{PointCloud, SensorError};
use crate::geometry::{Mat3, Vec3};
use crate::kdtree::KdTree;
use nalgebra::SymmetricEigen;
use rayon::prelude::*;

pub const DEFAULT_NORMAL_K: usize = 10;

/// Relative eigenvalue threshold below which a neighborhood counts as collinear.
const RANK_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NormalStats {
    pub valid: usize,
    pub degenerate: usize,
}

/// PCA normals over the `k` nearest neighbors of each point (the point
/// itself included), oriented so `n · (viewpoint − p) ≥ 0`.
///
/// A collinear neighborhood (scatter rank < 2) yields a `None` normal; such
/// points are skipped by tracking.
pub fn estimate_normals(cloud: &PointCloud, k: usize, viewpoint: &Vec3) -> Result<(PointCloud, NormalStats), SensorError> {
    if k < 3 {
        return Err(SensorError::InvalidInput(format!("normal estimation needs k >= 3, got {k}")));
    }
    if cloud.len() < k + 1 {
        return Err(SensorError::InvalidInput(format!(
            "normal estimation with k = {k} needs at least {} points, got {}",
            k + 1,
            cloud.len()
        )));
    }
    let tree = KdTree::new(cloud.points.clone());
    let normals: Vec<Option<Vec3>> = cloud
        .points
        .par_iter()
        .map(|p| {
            let nbrs = tree.knn(p, k + 1);
            let centroid = nbrs.iter().map(|n| cloud.points[n.id]).sum::<Vec3>() / nbrs.len() as f64;
            let mut scatter = Mat3::zeros();
            for n in &nbrs {
                let d = cloud.points[n.id] - centroid;
                scatter += d * d.transpose();
            }
            pca_normal(&scatter).map(|n| if n.dot(&(viewpoint - p)) < 0.0 { -n } else { n })
        })
        .collect();
    let valid = normals.iter().filter(|n| n.is_some()).count();
    let stats = NormalStats { valid, degenerate: normals.len() - valid };
    let mut out = cloud.clone();
    out.normals = Some(normals);
    Ok((out, stats))
}

fn pca_normal(scatter: &Mat3) -> Option<Vec3> {
    let eig = SymmetricEigen::new(*scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let largest = eig.eigenvalues[order[2]];
    let middle = eig.eigenvalues[order[1]];
    if !(largest > 0.0) || middle <= RANK_EPS * largest {
        return None;
    }
    Some(eig.eigenvectors.column(order[0]).normalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PoseSE3;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane_cloud(rng: &mut ChaCha8Rng) -> PointCloud {
        let pts = (0..300).map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0)).collect();
        PointCloud::new(pts, 0.0)
    }

    fn angle(a: &Vec3, b: &Vec3) -> f64 {
        a.dot(b).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn plane_normals_face_viewpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = plane_cloud(&mut rng);
        let (up, stats) = estimate_normals(&cloud, 10, &Vec3::new(0.0, 0.0, 10.0)).unwrap();
        assert_eq!(stats.valid, 300);
        for (_, _, n) in up.oriented_points() {
            assert!(angle(&n, &Vec3::z()) < 1e-3);
        }
        let (down, _) = estimate_normals(&cloud, 10, &Vec3::new(0.0, 0.0, -10.0)).unwrap();
        for (_, _, n) in down.oriented_points() {
            assert!(angle(&n, &-Vec3::z()) < 1e-3);
        }
    }

    fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                Vec3::new(r * phi.cos(), r * phi.sin(), z)
            })
            .collect()
    }

    #[test]
    fn sphere_normals_are_radial() {
        let pts = fibonacci_sphere(500);
        let cloud = PointCloud::new(pts, 0.0);
        // viewpoint inside: normals point inward, i.e. opposite the radial direction
        let (out, _) = estimate_normals(&cloud, 10, &Vec3::zeros()).unwrap();
        let worst = out.oriented_points().map(|(_, p, n)| angle(&n, &-p).to_degrees()).fold(0.0, f64::max);
        assert!(worst < 5.0, "worst deviation {worst} deg");
        // exterior viewpoint: still radial up to orientation
        let (out, _) = estimate_normals(&cloud, 10, &Vec3::new(0.0, 0.0, 10.0)).unwrap();
        for (_, p, n) in out.oriented_points() {
            assert!(n.dot(&p).abs().min(1.0).acos().to_degrees() < 5.0);
        }
    }

    #[test]
    fn collinear_neighborhood_is_flagged() {
        let mut pts: Vec<Vec3> = (0..20).map(|i| Vec3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        pts.extend((0..20).map(|i| Vec3::new(50.0 + i as f64, 50.0 + (i * i) as f64 * 0.01, 0.0)));
        let (out, stats) = estimate_normals(&PointCloud::new(pts, 0.0), 5, &Vec3::new(0.0, 0.0, 5.0)).unwrap();
        assert!(stats.degenerate >= 20);
        assert!(out.normals.as_ref().unwrap()[..20].iter().all(|n| n.is_none()));
    }

    #[test]
    fn rejects_small_inputs() {
        let cloud = PointCloud::new(vec![Vec3::zeros(); 4], 0.0);
        assert!(estimate_normals(&cloud, 10, &Vec3::zeros()).is_err());
        assert!(estimate_normals(&cloud, 2, &Vec3::zeros()).is_err());
    }

    #[test]
    fn normals_follow_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..400)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                let y: f64 = rng.random_range(-1.0..1.0);
                Vec3::new(x, y, 0.3 * x * x - 0.2 * y)
            })
            .collect();
        let cloud = PointCloud::new(pts, 0.0);
        let view = Vec3::new(0.2, 0.1, 4.0);
        let pose = PoseSE3::new(UnitQuaternion::from_scaled_axis(Vec3::new(0.3, -0.8, 1.2)), Vec3::new(2.0, 1.0, -3.0));
        let (a, _) = estimate_normals(&cloud, 10, &view).unwrap();
        let (b, _) = estimate_normals(&cloud.transformed(&pose), 10, &pose.transform_point(&view)).unwrap();
        for ((_, _, na), (_, _, nb)) in a.oriented_points().zip(b.oriented_points()) {
            assert!(angle(&pose.rotate(&na), &nb) < 1e-6);
        }
    }
}
