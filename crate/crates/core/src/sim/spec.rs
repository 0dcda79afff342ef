//! Line-oriented scene description.
//!
//! ```text
//! # comment
//! seed 7
//! extent 40
//! camera width=160 height=120 f=120 lidar_height=0.1
//! lidar rays=2000 hfov=81 vfov=25 range=100 noise=0
//! trajectory line frames=50 dt=0.1 start=0,0,1.5 heading=0 length=10 yaw_amp=3 yaw_period=20
//! trajectory arc frames=50 dt=0.1 center=0,0,1.5 radius=5 start=-90 sweep=90 profile=smooth
//! plane center=12,0,0 u=1,0,0 v=0,1,0 size=20,2.5 color=0.6,0.5,0.4 texture=waves:3
//! box min=3,1.8,0 max=3.6,2.5,3 color=0.8,0.2,0.2 texture=checker:0.5:0.1,0.1,0.1
//! sphere center=6,-1.5,0.6 radius=0.6 color=0.2,0.5,0.9
//! ```
//!
//! Omitted `size` makes a plane infinite. Unknown keys are errors.

use super::{LidarPattern, Material, PathShape, SceneObject, SceneSpec, Shape, SpeedProfile, Texture, TrajectorySpec};
use crate::camera::{forward_lidar_extrinsics, CameraModel};
use crate::geometry::Vec3;
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("cannot read scene file {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}, field `{field}`: {reason}")]
    Field { line: usize, field: String, reason: String },
    #[error("scene file has no `{0}` line")]
    Missing(&'static str),
}

/// Everything needed to generate a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationSpec {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub camera: CameraModel,
    pub lidar: LidarPattern,
}

impl SimulationSpec {
    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let mut seed = 0u64;
        let mut extent = None;
        let mut camera = None;
        let mut lidar = LidarPattern::default();
        let mut trajectory = None;
        let mut objects = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut words = content.split_whitespace();
            let keyword = words.next().expect("non-empty line");
            let rest: Vec<&str> = words.collect();
            match keyword {
                "seed" => seed = single(line, keyword, &rest)?,
                "extent" => {
                    let e: f64 = single(line, keyword, &rest)?;
                    if e <= 0.0 {
                        return Err(field_err(line, "extent", "must be positive"));
                    }
                    extent = Some(e);
                }
                "camera" => {
                    let mut f = Fields::new(line, &rest)?;
                    let w = f.take_or("width", 160usize)?;
                    let h = f.take_or("height", 120usize)?;
                    let focal = f.take_or("f", 120.0)?;
                    let lh = f.take_or("lidar_height", 0.1)?;
                    f.finish()?;
                    let cam = CameraModel::centered(focal, w, h).map_err(|e| field_err(line, "camera", &e.to_string()))?;
                    camera = Some(cam.with_extrinsics(forward_lidar_extrinsics(lh)));
                }
                "lidar" => {
                    let mut f = Fields::new(line, &rest)?;
                    lidar.rays = f.take_or("rays", lidar.rays)?;
                    lidar.h_fov_deg = f.take_or("hfov", lidar.h_fov_deg)?;
                    lidar.v_fov_deg = f.take_or("vfov", lidar.v_fov_deg)?;
                    lidar.max_range = f.take_or("range", lidar.max_range)?;
                    lidar.noise_sigma = f.take_or("noise", lidar.noise_sigma)?;
                    f.finish()?;
                    if lidar.noise_sigma < 0.0 {
                        return Err(field_err(line, "noise", "must be non-negative"));
                    }
                }
                "trajectory" => trajectory = Some(parse_trajectory(line, &rest)?),
                "plane" | "box" | "sphere" => objects.push(parse_object(line, keyword, &rest)?),
                other => return Err(SpecError::Syntax { line, reason: format!("unknown keyword `{other}`") }),
            }
        }
        let trajectory = trajectory.ok_or(SpecError::Missing("trajectory"))?;
        if objects.is_empty() {
            return Err(SpecError::Missing("plane/box/sphere"));
        }
        lidar.seed = seed;
        let camera = match camera {
            Some(c) => c,
            None => CameraModel::centered(120.0, 160, 120).expect("valid default").with_extrinsics(forward_lidar_extrinsics(0.1)),
        };
        let scene = SceneSpec::new(objects, extent.unwrap_or(40.0), seed);
        Ok(Self { scene, trajectory, camera, lidar })
    }

    pub fn from_file(path: &Path) -> Result<Self, SpecError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| SpecError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        Self::parse(&text)
    }

    /// Overrides the seed of both the scene and the LiDAR pattern.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scene.seed = seed;
        self.lidar.seed = seed;
        self
    }
}

pub fn parse_scene_file(path: &Path) -> Result<SimulationSpec, SpecError> {
    SimulationSpec::from_file(path)
}

fn field_err(line: usize, field: &str, reason: &str) -> SpecError {
    SpecError::Field { line, field: field.to_string(), reason: reason.to_string() }
}

fn single<T: std::str::FromStr>(line: usize, keyword: &str, rest: &[&str]) -> Result<T, SpecError> {
    match rest {
        [v] => v.parse().map_err(|_| field_err(line, keyword, &format!("cannot parse {v:?}"))),
        _ => Err(SpecError::Syntax { line, reason: format!("`{keyword}` takes exactly one value") }),
    }
}

/// `key=value` pairs of one line; every key must be consumed.
struct Fields<'a> {
    line: usize,
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    fn new(line: usize, words: &[&'a str]) -> Result<Self, SpecError> {
        let mut map = BTreeMap::new();
        for w in words {
            let (k, v) = w.split_once('=').ok_or_else(|| SpecError::Syntax { line, reason: format!("expected key=value, found {w:?}") })?;
            if map.insert(k, v).is_some() {
                return Err(field_err(line, k, "given twice"));
            }
        }
        Ok(Self { line, map })
    }

    fn take<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, SpecError> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| field_err(self.line, key, &format!("cannot parse {v:?}"))),
        }
    }

    fn take_or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, SpecError> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    fn require<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, SpecError> {
        self.take(key)?.ok_or_else(|| field_err(self.line, key, "required"))
    }

    fn vec3(&mut self, key: &str) -> Result<Option<Vec3>, SpecError> {
        let Some(v) = self.map.remove(key) else { return Ok(None) };
        parse_vec3(v).map(Some).ok_or_else(|| field_err(self.line, key, &format!("expected x,y,z, found {v:?}")))
    }

    fn require_vec3(&mut self, key: &str) -> Result<Vec3, SpecError> {
        self.vec3(key)?.ok_or_else(|| field_err(self.line, key, "required"))
    }

    fn raw(&mut self, key: &str) -> Option<&'a str> {
        self.map.remove(key)
    }

    fn finish(self) -> Result<(), SpecError> {
        match self.map.keys().next() {
            Some(k) => Err(field_err(self.line, k, "unknown field")),
            None => Ok(()),
        }
    }
}

fn parse_vec3(s: &str) -> Option<Vec3> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    (parts.len() == 3).then(|| Vec3::new(parts[0], parts[1], parts[2]))
}

fn parse_trajectory(line: usize, rest: &[&str]) -> Result<TrajectorySpec, SpecError> {
    let (kind, pairs) = rest.split_first().ok_or_else(|| SpecError::Syntax { line, reason: "trajectory needs a kind (line or arc)".into() })?;
    let mut f = Fields::new(line, pairs)?;
    let frames: usize = f.require("frames")?;
    if frames < 2 {
        return Err(field_err(line, "frames", "at least 2 frames"));
    }
    let dt = f.take_or("dt", 0.1)?;
    if dt <= 0.0 {
        return Err(field_err(line, "dt", "must be positive"));
    }
    let profile = match f.raw("profile").unwrap_or("constant") {
        "constant" => SpeedProfile::Constant,
        "smooth" => SpeedProfile::Smooth,
        other => return Err(field_err(line, "profile", &format!("expected constant or smooth, found {other:?}"))),
    };
    let yaw_amp_deg = f.take_or("yaw_amp", 0.0)?;
    let yaw_period = f.take_or("yaw_period", 0.0)?;
    let shape = match *kind {
        "line" => PathShape::Line {
            start: f.vec3("start")?.unwrap_or(Vec3::zeros()),
            heading_deg: f.take_or("heading", 0.0)?,
            length: f.require("length")?,
        },
        "arc" => {
            let radius: f64 = f.require("radius")?;
            if radius <= 0.0 {
                return Err(field_err(line, "radius", "must be positive"));
            }
            PathShape::Arc {
                center: f.vec3("center")?.unwrap_or(Vec3::zeros()),
                radius,
                start_deg: f.take_or("start", 0.0)?,
                sweep_deg: f.require("sweep")?,
            }
        }
        other => return Err(SpecError::Syntax { line, reason: format!("unknown trajectory kind `{other}`") }),
    };
    f.finish()?;
    Ok(TrajectorySpec { shape, frames, dt, profile, yaw_amp_deg, yaw_period })
}

fn parse_texture(line: usize, s: &str) -> Result<Texture, SpecError> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || field_err(line, "texture", &format!("cannot parse {s:?}"));
    match parts.as_slice() {
        ["solid"] => Ok(Texture::Solid),
        ["waves", f] => f.parse().map(Texture::Waves).map_err(|_| bad()),
        ["checker", size, alt] => {
            let size: f64 = size.parse().map_err(|_| bad())?;
            let alt = parse_vec3(alt).ok_or_else(bad)?;
            if size <= 0.0 {
                return Err(bad());
            }
            Ok(Texture::Checker { size, alt })
        }
        _ => Err(bad()),
    }
}

fn parse_object(line: usize, keyword: &str, rest: &[&str]) -> Result<SceneObject, SpecError> {
    let mut f = Fields::new(line, rest)?;
    let color = f.vec3("color")?.unwrap_or(Vec3::repeat(0.5));
    if color.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(field_err(line, "color", "components must lie in [0, 1]"));
    }
    let texture = match f.raw("texture") {
        Some(t) => parse_texture(line, t)?,
        None => Texture::Solid,
    };
    let shape = match keyword {
        "plane" => {
            let center = f.require_vec3("center")?;
            let u = f.require_vec3("u")?;
            let v = f.require_vec3("v")?;
            let (Some(u), Some(v)) = (u.try_normalize(1e-12), v.try_normalize(1e-12)) else {
                return Err(field_err(line, "u", "axes must be non-zero"));
            };
            if u.dot(&v).abs() > 1e-9 {
                return Err(field_err(line, "v", "must be orthogonal to u"));
            }
            let half = match f.raw("size") {
                None => (f64::INFINITY, f64::INFINITY),
                Some(s) => {
                    let p: Vec<f64> = s.split(',').map(|x| x.parse().ok()).collect::<Option<_>>().unwrap_or_default();
                    match p.as_slice() {
                        [a, b] if *a > 0.0 && *b > 0.0 => (*a, *b),
                        _ => return Err(field_err(line, "size", &format!("expected two positive half sizes, found {s:?}"))),
                    }
                }
            };
            Shape::Plane { center, u, v, half }
        }
        "box" => {
            let min = f.require_vec3("min")?;
            let max = f.require_vec3("max")?;
            if (0..3).any(|k| min[k] >= max[k]) {
                return Err(field_err(line, "max", "must exceed min on every axis"));
            }
            Shape::Cuboid { min, max }
        }
        _ => {
            let center = f.require_vec3("center")?;
            let radius: f64 = f.require("radius")?;
            if radius <= 0.0 {
                return Err(field_err(line, "radius", "must be positive"));
            }
            Shape::Sphere { center, radius }
        }
    };
    f.finish()?;
    Ok(SceneObject { shape, material: Material { color, texture } })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "trajectory line frames=3 length=1\nplane center=0,0,0 u=1,0,0 v=0,1,0\n";

    #[test]
    fn bundled_corridor_parses() {
        let spec = SimulationSpec::parse(crate::sim::PLANE_CORRIDOR).unwrap();
        assert_eq!(spec.trajectory.frames, 50);
        assert_eq!((spec.camera.width, spec.camera.height), (160, 120));
        assert!(spec.scene.objects.len() > 6);
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let spec = SimulationSpec::parse(MINIMAL).unwrap();
        assert_eq!(spec.lidar.rays, 2000);
        assert_eq!(spec.camera.fx, 120.0);
        assert!(matches!(spec.scene.objects[0].shape, Shape::Plane { half, .. } if half.0.is_infinite()));
    }

    #[test]
    fn errors_name_line_and_field() {
        let err = SimulationSpec::parse("trajectory line frames=3 length=1\nsphere center=0,0,0 radius=-1\n").unwrap_err();
        assert_eq!(err, SpecError::Field { line: 2, field: "radius".into(), reason: "must be positive".into() });
        let err = SimulationSpec::parse("\n\nbox min=0,0,0 max=1,1\n").unwrap_err();
        assert!(matches!(err, SpecError::Field { line: 3, ref field, .. } if field == "max"), "{err}");
        let err = SimulationSpec::parse("wall x=1\n").unwrap_err();
        assert!(matches!(err, SpecError::Syntax { line: 1, .. }));
        let err = SimulationSpec::parse(&format!("{MINIMAL}lidar rays=10 colour=1\n")).unwrap_err();
        assert!(matches!(err, SpecError::Field { line: 3, ref field, .. } if field == "colour"));
        assert_eq!(SimulationSpec::parse("plane center=0,0,0 u=1,0,0 v=0,1,0\n").unwrap_err(), SpecError::Missing("trajectory"));
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = SimulationSpec::from_file(Path::new("/nonexistent/x.scene")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.scene"));
    }
}
