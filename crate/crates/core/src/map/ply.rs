//! Binary little-endian PLY in the layout common to Gaussian-splatting
//! tools: position, normal, DC color coefficients, opacity logit, log
//! scales, wxyz rotation, plus a `reliable` flag.

use crate::gaussian::{GaussianPrimitive, Origin};
use crate::geometry::{quat_to_wxyz, quat_wxyz, Vec3};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Zeroth-order spherical harmonic constant.
const SH_C0: f64 = 0.282_094_791_773_878_14;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

const FLOAT_FIELDS: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0",
    "rot_1", "rot_2", "rot_3",
];

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn write_ply(path: &Path, primitives: &[GaussianPrimitive]) -> Result<(), PlyError> {
    let io = |e| PlyError::Io { path: path.display().to_string(), source: e };
    let mut out = Vec::with_capacity(256 + primitives.len() * 69);
    write!(out, "ply\nformat binary_little_endian 1.0\nelement vertex {}\n", primitives.len()).map_err(io)?;
    for f in FLOAT_FIELDS {
        writeln!(out, "property float {f}").map_err(io)?;
    }
    out.extend_from_slice(b"property uchar reliable\nend_header\n");
    for g in primitives {
        let n = g.normal();
        let c = g.color.map(|v| (v - 0.5) / SH_C0);
        let q = quat_to_wxyz(&g.rotation);
        let values = [
            g.mean.x,
            g.mean.y,
            g.mean.z,
            n.x,
            n.y,
            n.z,
            c.x,
            c.y,
            c.z,
            logit(g.opacity),
            g.log_scales.x,
            g.log_scales.y,
            g.log_scales.z,
            q[0],
            q[1],
            q[2],
            q[3],
        ];
        for v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.push(u8::from(g.reliable));
    }
    std::fs::write(path, out).map_err(io)
}

#[derive(Clone, Copy)]
enum Scalar {
    F32,
    F64,
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            "uchar" | "uint8" => Self::U8,
            "char" | "int8" => Self::I8,
            "ushort" | "uint16" => Self::U16,
            "short" | "int16" => Self::I16,
            "uint" | "uint32" => Self::U32,
            "int" | "int32" => Self::I32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::U8 | Self::I8 => 1,
            Self::U16 | Self::I16 => 2,
            Self::F32 | Self::U32 | Self::I32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
            Self::U8 => b[0] as f64,
            Self::I8 => b[0] as i8 as f64,
            Self::U16 => u16::from_le_bytes(b[..2].try_into().unwrap()) as f64,
            Self::I16 => i16::from_le_bytes(b[..2].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
        }
    }
}

/// Reads a file written by [`write_ply`] or any binary little-endian PLY
/// carrying the same vertex properties in any order. Missing `reliable`
/// defaults to true, missing normals leave the sign convention untouched.
pub fn read_ply(path: &Path) -> Result<Vec<GaussianPrimitive>, PlyError> {
    let p = path.display().to_string();
    let fmt = |reason: String| PlyError::Format { path: p.clone(), reason };
    let file = std::fs::File::open(path).map_err(|e| PlyError::Io { path: p.clone(), source: e })?;
    let mut reader = BufReader::new(file);

    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut count = None;
    let mut in_vertex = false;
    let mut line = String::new();
    let mut first = true;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| PlyError::Io { path: p.clone(), source: e })?;
        if n == 0 {
            return Err(fmt("unterminated header".into()));
        }
        let t = line.trim_end();
        if first {
            if t != "ply" {
                return Err(fmt("missing ply magic".into()));
            }
            first = false;
            continue;
        }
        let words: Vec<&str> = t.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", f, _] => {
                if *f != "binary_little_endian" {
                    return Err(fmt(format!("unsupported format {f}")));
                }
            }
            ["element", name, n] => {
                if count.is_some() && in_vertex {
                    in_vertex = false;
                } else if *name == "vertex" {
                    count = Some(n.parse::<usize>().map_err(|_| fmt(format!("bad vertex count {n}")))?);
                    in_vertex = true;
                } else if count.is_none() {
                    return Err(fmt(format!("element {name} before vertex is not supported")));
                }
            }
            ["property", "list", ..] if in_vertex => return Err(fmt("list properties are not supported".into())),
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| fmt(format!("unknown property type {ty}")))?;
                props.push((name.to_string(), s));
            }
            _ => {}
        }
    }
    let count = count.ok_or_else(|| fmt("no vertex element".into()))?;
    let find = |name: &str| props.iter().position(|(n, _)| n == name);
    let required: Vec<usize> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
        .iter()
        .map(|n| find(n).ok_or_else(|| fmt(format!("missing property {n}"))))
        .collect::<Result<_, _>>()?;
    let normal_idx = ["nx", "ny", "nz"].iter().map(|n| find(n)).collect::<Option<Vec<usize>>>();
    let reliable_idx = find("reliable");

    let mut offsets = Vec::with_capacity(props.len());
    let mut stride = 0;
    for (_, s) in &props {
        offsets.push(stride);
        stride += s.size();
    }
    let mut body = vec![0u8; stride * count];
    reader.read_exact(&mut body).map_err(|_| fmt(format!("truncated body, expected {count} vertices")))?;

    let mut out = Vec::with_capacity(count);
    for v in 0..count {
        let rec = &body[v * stride..(v + 1) * stride];
        let get = |k: usize| props[k].1.read(&rec[offsets[k]..]);
        let r: Vec<f64> = required.iter().map(|&k| get(k)).collect();
        let mean = Vec3::new(r[0], r[1], r[2]);
        let color = Vec3::new(r[3], r[4], r[5]).map(|c| (c * SH_C0 + 0.5).clamp(0.0, 1.0));
        let opacity = sigmoid(r[6]);
        let rotation = quat_wxyz([r[10], r[11], r[12], r[13]]);
        let mut g = GaussianPrimitive::new(mean, rotation, Vec3::zeros(), opacity, color);
        g.log_scales = Vec3::new(r[7], r[8], r[9]);
        g.clamp_scales();
        if let Some(idx) = &normal_idx {
            let n = Vec3::new(get(idx[0]), get(idx[1]), get(idx[2]));
            if g.normal().dot(&n) < 0.0 {
                g.normal_flipped = !g.normal_flipped;
            }
        }
        g.reliable = reliable_idx.is_none_or(|k| get(k) != 0.0);
        g.origin = Origin::Lidar;
        if !g.is_finite() {
            return Err(fmt(format!("vertex {v} has non-finite values")));
        }
        out.push(g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    fn sample() -> Vec<GaussianPrimitive> {
        (0..20)
            .map(|i| {
                let f = i as f64;
                let mut g = GaussianPrimitive::new(
                    Vec3::new(f, -f * 0.5, 2.0),
                    UnitQuaternion::from_scaled_axis(Vec3::new(0.1 * f, 0.2, -0.05 * f)),
                    Vec3::new(0.01 + 0.001 * f, 0.2, 0.3),
                    0.1 + 0.04 * f,
                    Vec3::new(0.05 * f, 0.3, 0.9),
                );
                g.reliable = i % 3 != 0;
                g.normal_flipped = i % 2 == 0;
                g
            })
            .collect()
    }

    #[test]
    fn round_trip_at_float_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.ply");
        let prims = sample();
        write_ply(&path, &prims).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.len(), prims.len());
        for (a, b) in prims.iter().zip(&back) {
            assert!((a.mean - b.mean).norm() < 1e-5);
            assert!((a.color - b.color).norm() < 1e-5);
            assert!((a.opacity - b.opacity).abs() < 1e-5);
            assert!((a.log_scales - b.log_scales).norm() < 1e-5);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-5);
            assert_eq!(a.reliable, b.reliable);
            assert!((a.normal() - b.normal()).norm() < 1e-5);
        }
    }

    #[test]
    fn property_order_does_not_matter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shuffled.ply");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n");
        let order = ["rot_0", "rot_1", "rot_2", "rot_3", "opacity", "z", "y", "x", "scale_2", "scale_1", "scale_0", "f_dc_2", "f_dc_1", "f_dc_0"];
        for n in order {
            bytes.extend_from_slice(format!("property float {n}\n").as_bytes());
        }
        bytes.extend_from_slice(b"end_header\n");
        let values = [1.0f32, 0.0, 0.0, 0.0, 0.0, 3.0, 2.0, 1.0, -1.0, -2.0, -3.0, 0.0, 0.0, 0.0];
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let g = &read_ply(&path).unwrap()[0];
        assert_eq!(g.mean, Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(g.log_scales, Vec3::new(-3.0, -2.0, -1.0));
        assert!((g.opacity - 0.5).abs() < 1e-12);
        assert!((g.color - Vec3::repeat(0.5)).norm() < 1e-12);
        assert!(g.reliable);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        write_ply(&path, &sample()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_ply(&path), Err(PlyError::Format { .. })));
    }
}
