//! The Gaussian map: storage, spatial index, sliding-window submap and the
//! update operations (keyframe insertion, conditional splitting, skybox,
//! pruning).

mod cgc;
mod density;
mod insert;
mod ply;
mod prune;
mod skybox;

pub use cgc::cgc_split;
pub use density::{
    default_radius, density, fast_quadratic, reconstruct_covariance, weight, weights_for, DensityMode, DensityQuery,
};
pub use insert::{insert_keyframe_points, seed_color_primitives, InsertParams};
pub use ply::{read_ply, write_ply, PlyError};
pub use prune::{prune, PruneParams};
pub use skybox::{init_skybox, init_skybox_at, SKY_COLOR};

use crate::gaussian::{GaussianPrimitive, Origin};
use crate::geometry::Vec3;
use crate::kdtree::{KdTree, Neighbor};
use std::collections::VecDeque;
use thiserror::Error;

/// Number of insertion events the tracking submap spans.
pub const DEFAULT_WINDOW_EVENTS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("no reliable primitive available as a split anchor")]
    NoReliableAnchor,
    #[error("primitive index {0} out of range")]
    BadIndex(usize),
}

#[derive(Clone, Debug)]
pub struct GaussianMap {
    primitives: Vec<GaussianPrimitive>,
    index: KdTree,
    /// Frame indices of the most recent insertion events, oldest first.
    window: VecDeque<u32>,
    window_events: usize,
    current_frame: u32,
}

impl Default for GaussianMap {
    fn default() -> Self {
        Self::new()
    }
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::with_window(DEFAULT_WINDOW_EVENTS)
    }

    pub fn with_window(window_events: usize) -> Self {
        Self {
            primitives: Vec::new(),
            index: KdTree::default(),
            window: VecDeque::new(),
            window_events: window_events.max(1),
            current_frame: 0,
        }
    }

    /// Map holding `primitives` as a single insertion event at their birth frames.
    pub fn from_primitives(primitives: Vec<GaussianPrimitive>) -> Self {
        let mut map = Self::new();
        let mut frames: Vec<u32> = primitives.iter().map(|g| g.birth_frame).collect();
        frames.sort_unstable();
        frames.dedup();
        map.current_frame = frames.last().copied().unwrap_or(0);
        map.primitives = primitives;
        for f in frames {
            map.record_event(f);
        }
        map.rebuild_index();
        map
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn primitives(&self) -> &[GaussianPrimitive] {
        &self.primitives
    }

    pub fn get(&self, i: usize) -> Option<&GaussianPrimitive> {
        self.primitives.get(i)
    }

    pub fn current_frame(&self) -> u32 {
        self.current_frame
    }

    pub fn set_current_frame(&mut self, frame: u32) {
        self.current_frame = self.current_frame.max(frame);
    }

    /// Frame indices of the insertion events covered by the submap.
    pub fn window(&self) -> impl Iterator<Item = u32> + '_ {
        self.window.iter().copied()
    }

    fn record_event(&mut self, frame: u32) {
        if self.window.back() == Some(&frame) {
            return;
        }
        self.window.push_back(frame);
        while self.window.len() > self.window_events {
            self.window.pop_front();
        }
    }

    /// Appends a batch born at `frame` as one insertion event.
    pub fn insert_batch(&mut self, frame: u32, batch: Vec<GaussianPrimitive>) -> usize {
        self.set_current_frame(frame);
        let n = batch.len();
        self.primitives.extend(batch.into_iter().map(|mut g| {
            g.birth_frame = frame;
            g
        }));
        self.record_event(frame);
        self.rebuild_index();
        n
    }

    /// Appends primitives without registering an insertion event.
    pub fn push_untracked(&mut self, batch: impl IntoIterator<Item = GaussianPrimitive>) {
        self.primitives.extend(batch);
        self.rebuild_index();
    }

    /// Mutable access to all primitives; the spatial index is rebuilt and
    /// invariants restored afterwards.
    pub fn update<R>(&mut self, f: impl FnOnce(&mut [GaussianPrimitive]) -> R) -> R {
        let out = f(&mut self.primitives);
        for g in &mut self.primitives {
            g.clamp_scales();
            g.color = g.color.map(|c| c.clamp(0.0, 1.0));
            g.opacity = g.opacity.clamp(0.0, 1.0);
        }
        self.rebuild_index();
        out
    }

    /// Keeps the primitives for which `keep(index, primitive)` holds.
    pub fn retain(&mut self, mut keep: impl FnMut(usize, &GaussianPrimitive) -> bool) -> usize {
        let before = self.primitives.len();
        let mut i = 0;
        self.primitives.retain(|g| {
            let k = keep(i, g);
            i += 1;
            k
        });
        self.rebuild_index();
        before - self.primitives.len()
    }

    pub fn rebuild_index(&mut self) {
        self.index = KdTree::new(self.primitives.iter().map(|g| g.mean).collect());
    }

    /// Primitives born within the last window of insertion events.
    pub fn submap(&self) -> Vec<usize> {
        self.primitives
            .iter()
            .enumerate()
            .filter(|(_, g)| self.window.contains(&g.birth_frame))
            .map(|(i, _)| i)
            .collect()
    }

    /// Submap primitives usable for tracking (the sky shell is excluded).
    pub fn tracking_submap(&self) -> Vec<usize> {
        self.submap().into_iter().filter(|&i| self.primitives[i].origin != Origin::Skybox).collect()
    }

    pub fn nearest(&self, x: &Vec3) -> Option<Neighbor> {
        self.index.nearest(x)
    }

    pub fn knn(&self, x: &Vec3, k: usize) -> Vec<Neighbor> {
        self.index.knn(x, k)
    }

    pub fn within_radius(&self, x: &Vec3, r: f64) -> Vec<Neighbor> {
        self.index.within_radius(x, r)
    }

    pub fn index(&self) -> &KdTree {
        &self.index
    }

    /// Indices of primitives that are neither reliable nor part of the sky.
    pub fn unreliable(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !self.primitives[i].reliable && self.primitives[i].origin != Origin::Skybox)
            .collect()
    }

    pub fn all_valid(&self) -> bool {
        self.primitives.iter().all(|g| g.is_valid())
    }
}
