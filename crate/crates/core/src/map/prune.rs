use super::{default_radius, weights_for, DensityMode, GaussianMap};
use crate::gaussian::Origin;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneParams {
    pub opacity_floor: f64,
    /// Keep sliding-window primitives whose weight exceeds the window median
    /// even when they are faint.
    pub protect_window: bool,
}

impl Default for PruneParams {
    fn default() -> Self {
        Self { opacity_floor: 0.05, protect_window: true }
    }
}

/// Removes primitives whose opacity dropped below the floor after at least
/// one back-end round. Returns how many were removed.
pub fn prune(map: &mut GaussianMap, params: &PruneParams) -> usize {
    let candidates: Vec<usize> = (0..map.len())
        .filter(|&i| {
            let g = &map.primitives()[i];
            g.rounds_optimized >= 1 && g.opacity < params.opacity_floor
        })
        .collect();
    if candidates.is_empty() {
        return 0;
    }
    let mut protected = vec![false; map.len()];
    if params.protect_window {
        let window: Vec<usize> =
            map.submap().into_iter().filter(|&i| map.primitives()[i].origin != Origin::Skybox).collect();
        if let Some(radius) = default_radius(map, &window) {
            let w = weights_for(map, &window, radius, DensityMode::Exact);
            let mut sorted = w.clone();
            sorted.sort_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            for (&i, &wi) in window.iter().zip(&w) {
                protected[i] = wi > median;
            }
        }
    }
    let mut remove = vec![false; map.len()];
    for &i in &candidates {
        remove[i] = !protected[i];
    }
    map.retain(|i, _| !remove[i])
}
