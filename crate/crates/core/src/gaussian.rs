//! The anisotropic 3D Gaussian, the single atom of the map.

use crate::geometry::{renormalize, Mat3, PoseSE3, Vec3};
use nalgebra::UnitQuaternion;

/// Smallest standard deviation any primitive may have along an eigen-axis.
pub const MIN_SCALE: f64 = 1e-4;

/// Where a primitive came from. Drives reliability bookkeeping and which
/// primitives take part in tracking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    /// Created from a LiDAR return.
    Lidar,
    /// Seeded from image content only, waiting for a conditional split.
    Color,
    /// Re-anchored on a LiDAR-backed primitive, awaiting one optimization round.
    Split,
    /// Part of the sky shell. Rendered, never associated during tracking.
    Skybox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vec3,
    pub rotation: UnitQuaternion<f64>,
    pub log_scales: Vec3,
    /// Activated opacity in (0, 1).
    pub opacity: f64,
    pub color: Vec3,
    pub reliable: bool,
    pub birth_frame: u32,
    pub origin: Origin,
    /// `true` when the stored normal is the negated smallest eigen-axis.
    pub normal_flipped: bool,
    /// Number of back-end map rounds this primitive took part in.
    pub rounds_optimized: u32,
}

impl GaussianPrimitive {
    pub fn new(mean: Vec3, rotation: UnitQuaternion<f64>, scales: Vec3, opacity: f64, color: Vec3) -> Self {
        let mut g = Self {
            mean,
            rotation: renormalize(rotation),
            log_scales: scales.map(|s| s.max(MIN_SCALE).ln()),
            opacity,
            color,
            reliable: true,
            birth_frame: 0,
            origin: Origin::Lidar,
            normal_flipped: false,
            rounds_optimized: 0,
        };
        g.clamp_scales();
        g
    }

    /// Isotropic primitive with identity rotation.
    pub fn isotropic(mean: Vec3, sigma: f64, opacity: f64, color: Vec3) -> Self {
        Self::new(mean, UnitQuaternion::identity(), Vec3::repeat(sigma), opacity, color)
    }

    pub fn scales(&self) -> Vec3 {
        self.log_scales.map(f64::exp)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn clamp_scales(&mut self) {
        let floor = MIN_SCALE.ln();
        self.log_scales = self.log_scales.map(|l| l.max(floor));
    }

    /// Σ = R diag(σ²) Rᵀ.
    pub fn covariance(&self) -> Mat3 {
        let r = self.rotation_matrix();
        let s2 = self.log_scales.map(|l| (2.0 * l).exp());
        let cov = r * Mat3::from_diagonal(&s2) * r.transpose();
        0.5 * (cov + cov.transpose())
    }

    /// Σ⁻¹ built from the factorization, no general inverse needed.
    pub fn precision(&self) -> Mat3 {
        let r = self.rotation_matrix();
        let inv_s2 = self.log_scales.map(|l| (-2.0 * l).exp());
        let p = r * Mat3::from_diagonal(&inv_s2) * r.transpose();
        0.5 * (p + p.transpose())
    }

    /// exp(−½ (x−μ)ᵀ Σ⁻¹ (x−μ)).
    pub fn eval(&self, x: &Vec3) -> f64 {
        // Mahalanobis distance in the primitive's own frame.
        let local = self.rotation.inverse() * (x - self.mean);
        let inv = self.log_scales.map(|l| (-l).exp());
        let z = local.component_mul(&inv);
        (-0.5 * z.norm_squared()).exp()
    }

    /// Index of the eigen-axis with the smallest scale; ties go to the lowest index.
    pub fn normal_axis(&self) -> usize {
        let s = &self.log_scales;
        let mut best = 0;
        for k in 1..3 {
            if s[k] < s[best] {
                best = k;
            }
        }
        best
    }

    /// Unit normal: the smallest-scale eigen-axis, oriented by the stored sign.
    pub fn normal(&self) -> Vec3 {
        let axis = self.rotation_matrix().column(self.normal_axis()).into_owned();
        if self.normal_flipped {
            -axis
        } else {
            axis
        }
    }

    /// Smallest standard deviation, the extent along the normal.
    pub fn sigma_along(&self) -> f64 {
        self.log_scales[self.normal_axis()].exp()
    }

    /// Flips the stored sign so the normal points towards `viewpoint`.
    pub fn orient_normal_towards(&mut self, viewpoint: &Vec3) {
        if self.normal().dot(&(viewpoint - self.mean)) < 0.0 {
            self.normal_flipped = !self.normal_flipped;
        }
    }

    /// Rigidly moves the primitive.
    pub fn transformed(&self, pose: &PoseSE3) -> Self {
        let mut g = self.clone();
        g.mean = pose.transform_point(&self.mean);
        g.rotation = renormalize(pose.rotation * self.rotation);
        g
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.log_scales.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
            && self.color.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
    }

    /// Checks every type invariant; used by tests and debug assertions.
    pub fn is_valid(&self) -> bool {
        self.is_finite()
            && self.scales().iter().all(|&s| s >= MIN_SCALE * (1.0 - 1e-12))
            && (self.rotation.coords.norm() - 1.0).abs() < 1e-9
            && self.opacity >= 0.0
            && self.opacity <= 1.0
            && self.color.iter().all(|&c| (0.0..=1.0).contains(&c))
    }
}

/// Rotation whose first column is `n`; the remaining columns complete a
/// right-handed orthonormal basis.
pub fn basis_from_normal(n: &Vec3) -> Mat3 {
    let n = n.normalize();
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let t1 = n.cross(&helper).normalize();
    let t2 = n.cross(&t1);
    Mat3::from_columns(&[n, t1, t2])
}

pub fn rotation_from_matrix(m: &Mat3) -> UnitQuaternion<f64> {
    renormalize(UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(*m)))
}
