//! Rigid-body transforms and small linear-algebra helpers.
//!
//! Twists are ordered `(v, ω)`: translation part first, rotation part last.
//! Pose perturbations throughout the crate are applied on the right,
//! `T ← T · exp(δ)`, i.e. expressed in the body frame.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector6};
use std::ops::Mul;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Vec6 = Vector6<f64>;

const TAYLOR_EPS: f64 = 1e-6;

/// Skew-symmetric matrix such that `skew(a) * b == a.cross(&b)`.
#[rustfmt::skip]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(
         0.0, -v.z,  v.y,
         v.z,  0.0, -v.x,
        -v.y,  v.x,  0.0,
    )
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`:
/// returns `(m23 - m32, m31 - m13, m12 - m21)`.
pub fn vee_antisym(m: &Mat3) -> Vec3 {
    Vec3::new(m[(1, 2)] - m[(2, 1)], m[(2, 0)] - m[(0, 2)], m[(0, 1)] - m[(1, 0)])
}

/// Rigid transform; by convention in this crate a sensor pose maps sensor
/// coordinates into world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self { rotation: renormalize(rotation), translation }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self { rotation: UnitQuaternion::identity(), translation }
    }

    /// Builds a pose from a rotation matrix, which is re-orthonormalized.
    pub fn from_matrix_parts(rotation: &Mat3, translation: Vec3) -> Self {
        let rot = nalgebra::Rotation3::from_matrix(rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// Camera-style pose at `eye` looking at `target`, with camera axes
    /// x right, y down, z forward and `up` the world up direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vec3::x()).try_normalize(1e-12).unwrap_or_else(|| z.cross(&Vec3::y()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let m = Mat3::from_columns(&[x, y, z]);
        Self::from_matrix_parts(&m, eye)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let inv = self.rotation.inverse();
        PoseSE3 { rotation: renormalize(inv), translation: -(inv * self.translation) }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Exponential map from a twist `(v, ω)` to SE(3).
    pub fn exp(xi: &Vec6) -> PoseSE3 {
        let v = Vec3::new(xi[0], xi[1], xi[2]);
        let w = Vec3::new(xi[3], xi[4], xi[5]);
        let theta2 = w.norm_squared();
        let k = skew(&w);
        let (a, b) = if theta2 < TAYLOR_EPS {
            (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
        } else {
            let theta = theta2.sqrt();
            ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
        };
        let jac = Mat3::identity() + a * k + b * k * k;
        PoseSE3 { rotation: UnitQuaternion::from_scaled_axis(w), translation: jac * v }
    }

    /// Logarithm map, inverse of [`PoseSE3::exp`].
    pub fn log(&self) -> Vec6 {
        let w = self.rotation.scaled_axis();
        let theta2 = w.norm_squared();
        let k = skew(&w);
        let c = if theta2 < TAYLOR_EPS {
            1.0 / 12.0 + theta2 / 720.0
        } else {
            let theta = theta2.sqrt();
            (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
        };
        let jac_inv = Mat3::identity() - 0.5 * k + c * k * k;
        let v = jac_inv * self.translation;
        Vec6::new(v.x, v.y, v.z, w.x, w.y, w.z)
    }

    /// `self · exp(delta)`.
    pub fn retract(&self, delta: &Vec6) -> PoseSE3 {
        self.compose(&PoseSE3::exp(delta))
    }

    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Rotation angle and translation distance between two poses.
    pub fn distance_to(&self, other: &PoseSE3) -> (f64, f64) {
        let rel = self.inverse().compose(other);
        (rel.rotation_angle(), (self.translation - other.translation).norm())
    }
}

impl Mul for PoseSE3 {
    type Output = PoseSE3;
    fn mul(self, rhs: PoseSE3) -> PoseSE3 {
        self.compose(&rhs)
    }
}

impl Mul<&PoseSE3> for &PoseSE3 {
    type Output = PoseSE3;
    fn mul(self, rhs: &PoseSE3) -> PoseSE3 {
        self.compose(rhs)
    }
}

/// Normalizes the underlying quaternion and fixes the sign so `w ≥ 0`.
pub fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let mut raw = q.into_inner();
    if raw.w < 0.0 {
        raw = -raw;
    }
    // already unit to rounding: keep the bits so repeated calls are stable
    if (raw.norm_squared() - 1.0).abs() <= 4.0 * f64::EPSILON {
        return UnitQuaternion::new_unchecked(raw);
    }
    UnitQuaternion::new_normalize(raw)
}

/// Quaternion from `[w, x, y, z]` components, normalized.
pub fn quat_wxyz(q: [f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(Quaternion::new(q[0], q[1], q[2], q[3]))
}

pub fn quat_to_wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_pose() -> impl Strategy<Value = PoseSE3> {
        (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-5.0..5.0f64)).prop_map(|(w, t)| {
            PoseSE3::new(UnitQuaternion::from_scaled_axis(Vec3::from(w)), Vec3::from(t))
        })
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let p = PoseSE3::exp(&Vec6::zeros());
        assert_eq!(p.translation, Vec3::zeros());
        assert!(p.rotation_angle() < 1e-15);
    }

    #[test]
    fn skew_matches_cross() {
        let a = Vec3::new(0.3, -1.2, 2.0);
        let b = Vec3::new(-0.7, 0.1, 0.4);
        assert!((skew(&a) * b - a.cross(&b)).norm() < 1e-15);
        assert!((vee_antisym(&skew(&a)) + 2.0 * a).norm() < 1e-15);
    }

    #[test]
    fn look_at_points_z_axis_at_target() {
        let p = PoseSE3::look_at(Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 2.0, 3.0), Vec3::z());
        let fwd = p.rotate(&Vec3::z());
        assert!((fwd - Vec3::x()).norm() < 1e-12);
        // image y axis points down in the world
        assert!((p.rotate(&Vec3::y()) + Vec3::z()).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn compose_with_inverse_is_identity(p in arb_pose()) {
            let id = p.compose(&p.inverse());
            prop_assert!(id.rotation_angle() < 1e-9);
            prop_assert!(id.translation.norm() < 1e-9);
            prop_assert!((id.rotation.into_inner().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn inverse_undoes_transform(p in arb_pose(), x in prop::array::uniform3(-10.0..10.0f64)) {
            let x = Vec3::from(x);
            let back = p.inverse().transform_point(&p.transform_point(&x));
            prop_assert!((back - x).norm() < 1e-9);
        }

        #[test]
        fn log_inverts_exp(v in prop::array::uniform3(-2.0..2.0f64), w in prop::array::uniform3(-1.0..1.0f64)) {
            let xi = Vec6::new(v[0], v[1], v[2], w[0], w[1], w[2]);
            let back = PoseSE3::exp(&xi).log();
            prop_assert!((back - xi).norm() < 1e-9);
        }

        #[test]
        fn quaternion_stays_unit(a in arb_pose(), b in arb_pose()) {
            let c = a * b * a.inverse() * b;
            prop_assert!((c.rotation.into_inner().norm() - 1.0).abs() < 1e-9);
        }
    }
}
