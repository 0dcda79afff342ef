//! Flat `key = value` run configuration with `#` comments.

use crate::backend::{BackendParams, LearningRates};
use crate::map::{DensityMode, InsertParams, PruneParams};
use crate::tracking::TrackingParams;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value {value:?} for `{key}`")]
    BadValue { line: usize, key: String, value: String },
}

/// Value types that can appear in the config file.
trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn show(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for DensityMode {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "exact" => Some(DensityMode::Exact),
            "fast" => Some(DensityMode::Fast),
            _ => None,
        }
    }
    fn show(&self) -> String {
        match self {
            DensityMode::Exact => "exact".into(),
            DensityMode::Fast => "fast".into(),
        }
    }
}

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every tunable of a run.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl RunConfig {
            /// `(key, default, description)` for every field, in file order.
            pub fn fields() -> Vec<(&'static str, String, &'static str)> {
                let d = Self::default();
                vec![ $( (stringify!($name), d.$name.show(), concat!($($doc),*).trim()), )* ]
            }

            fn set(&mut self, key: &str, value: &str) -> Option<Result<(), ()>> {
                match key {
                    $( stringify!($name) => Some(<$ty>::parse_value(value).map(|v| self.$name = v).ok_or(())), )*
                    _ => None,
                }
            }

            /// Serialized form; parsing it gives back an equal config.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $( writeln!(s, "{} = {}", stringify!($name), self.$name.show()).unwrap(); )*
                s
            }
        }
    };
}

run_config! {
    /// Weight of the geometric term against the photometric term.
    lambda1: f64 = 0.5,
    /// Weight of the normal-thinness term.
    lambda2: f64 = 0.01,
    /// Weight of the normal-alignment term in tracking.
    lambda_r: f64 = 0.1,
    /// Gauss-Newton iterations per frame.
    tracking_iterations: usize = 30,
    /// Update norm that ends tracking early.
    tracking_tolerance: f64 = 1e-5,
    /// Point-to-primitive association distance (m).
    max_correspondence_dist: f64 = 1.0,
    /// Fewest correspondences before tracking is declared lost.
    min_inliers: usize = 50,
    /// Robust (Huber) weighting of tracking residuals.
    huber: bool = true,
    /// Density evaluation for primitive weights: exact or fast.
    density_mode: DensityMode = DensityMode::Exact,
    /// A frame becomes a keyframe when covisibility drops below this.
    covisibility_threshold: f64 = 0.85,
    /// Neighbors used for LiDAR normal estimation.
    normal_k: usize = crate::sensor::DEFAULT_NORMAL_K,
    /// Insertion events in the tracking submap.
    window_events: usize = crate::map::DEFAULT_WINDOW_EVENTS,
    /// Keyframes per back-end batch.
    batch_size: usize = 5,
    /// Pose-round iterations per batch.
    pose_iterations: usize = 10,
    /// Map-round iterations per batch.
    map_iterations: usize = 20,
    /// Mean learning rate, times the scene extent.
    lr_mean: f64 = 1.6e-4,
    lr_log_scales: f64 = 5e-3,
    lr_rotation: f64 = 1e-3,
    lr_opacity: f64 = 5e-2,
    lr_color: f64 = 2.5e-3,
    /// Opacity of new primitives.
    initial_opacity: f64 = 0.5,
    /// Opacity below which optimized primitives are pruned.
    prune_opacity: f64 = 0.05,
    /// Pixel stride of color-only seeds (0 disables them).
    color_seed_stride: usize = 16,
    /// Sky shell primitives (0 disables the shell).
    skybox_count: usize = 1000,
    skybox_radius: f64 = 50.0,
    /// Image/scan pairing tolerance (s).
    pairing_tolerance: f64 = 0.05,
    /// Seed for every random choice of a run.
    seed: u64 = 0,
    /// Worker threads; 1 runs tracking and back-end sequentially.
    threads: usize = 1,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            match cfg.set(key, value) {
                None => return Err(ConfigError::UnknownKey { line, key: key.into() }),
                Some(Err(())) => return Err(ConfigError::BadValue { line, key: key.into(), value: value.into() }),
                Some(Ok(())) => {}
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn tracking(&self) -> TrackingParams {
        TrackingParams {
            max_iterations: self.tracking_iterations,
            tolerance: self.tracking_tolerance,
            max_dist: self.max_correspondence_dist,
            min_inliers: self.min_inliers,
            lambda_r: self.lambda_r,
            huber: self.huber,
            density_mode: self.density_mode,
            ..TrackingParams::default()
        }
    }

    pub fn backend(&self) -> BackendParams {
        BackendParams {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            batch_size: self.batch_size.max(1),
            pose_iters: self.pose_iterations,
            map_iters: self.map_iterations,
            rates: LearningRates {
                mean: self.lr_mean,
                log_scales: self.lr_log_scales,
                rotation: self.lr_rotation,
                opacity: self.lr_opacity,
                color: self.lr_color,
            },
            insert: InsertParams { initial_opacity: self.initial_opacity, ..InsertParams::default() },
            prune: PruneParams { opacity_floor: self.prune_opacity, ..PruneParams::default() },
            color_seed_stride: self.color_seed_stride,
            skybox_count: self.skybox_count,
            skybox_radius: self.skybox_radius,
            window_events: self.window_events.max(1),
        }
    }

    /// One line per field: key, default and description.
    pub fn help_text() -> String {
        let mut s = String::new();
        for (key, default, doc) in Self::fields() {
            if doc.is_empty() {
                writeln!(s, "  {key} = {default}").unwrap();
            } else {
                writeln!(s, "  {key} = {default}    {doc}").unwrap();
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.lambda2 = 0.05;
        cfg.lr_mean = 1.0 / 3.0;
        cfg.density_mode = DensityMode::Fast;
        cfg.huber = false;
        cfg.seed = 7;
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::parse("# tuned\n\nlambda1 = 0.3  # geometry weight\n").unwrap();
        assert_eq!(cfg.lambda1, 0.3);
        assert_eq!(cfg.lambda2, 0.01);
    }

    #[test]
    fn errors_carry_the_line() {
        assert_eq!(RunConfig::parse("lambda1 = 0.3\nlamda2 = 1\n").unwrap_err(), ConfigError::UnknownKey { line: 2, key: "lamda2".into() });
        assert_eq!(
            RunConfig::parse("threads = many\n").unwrap_err(),
            ConfigError::BadValue { line: 1, key: "threads".into(), value: "many".into() }
        );
        assert_eq!(RunConfig::parse("\nhuber\n").unwrap_err(), ConfigError::Syntax { line: 2 });
    }

    #[test]
    fn help_lists_every_field() {
        let help = RunConfig::help_text();
        for (key, default, _) in RunConfig::fields() {
            assert!(help.contains(&format!("{key} = {default}")));
        }
        assert_eq!(RunConfig::fields().len(), RunConfig::default().to_text().lines().count());
    }
}
