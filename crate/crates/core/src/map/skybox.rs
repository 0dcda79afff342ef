use super::GaussianMap;
use crate::gaussian::{basis_from_normal, rotation_from_matrix, GaussianPrimitive, Origin};
use crate::geometry::{PoseSE3, Vec3};

pub const SKY_COLOR: [f64; 3] = [0.53, 0.81, 0.92];

/// Places `n` sky primitives on the upper (z ≥ 0) hemisphere of `radius`
/// around the origin, on a Fibonacci lattice. They are flat discs facing the
/// origin, sized to overlap their lattice neighbors, unreliable and flagged
/// so tracking ignores them.
pub fn init_skybox(map: &mut GaussianMap, n: usize, radius: f64) -> usize {
    init_skybox_at(map, n, radius, &PoseSE3::identity())
}

/// As [`init_skybox`] with the shell built in a local z-up frame and then
/// moved into the world by `sky_to_world`.
pub fn init_skybox_at(map: &mut GaussianMap, n: usize, radius: f64, sky_to_world: &PoseSE3) -> usize {
    if n == 0 {
        return 0;
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let spacing = (2.0 * std::f64::consts::PI * radius * radius / n as f64).sqrt();
    let tangential = 0.6 * spacing;
    let frame = map.current_frame();
    let sky: Vec<GaussianPrimitive> = (0..n)
        .map(|i| {
            let z = (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let dir = Vec3::new(r * phi.cos(), r * phi.sin(), z);
            let basis = basis_from_normal(&-dir);
            let g = GaussianPrimitive::new(
                dir * radius,
                rotation_from_matrix(&basis),
                Vec3::new(0.1 * tangential, tangential, tangential),
                0.9,
                Vec3::from(SKY_COLOR),
            );
            let mut g = g.transformed(sky_to_world);
            g.origin = Origin::Skybox;
            g.reliable = false;
            g.birth_frame = frame;
            g
        })
        .collect();
    map.push_untracked(sky);
    n
}
