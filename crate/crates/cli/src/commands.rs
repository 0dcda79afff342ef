use serde::Serialize;
use splatslam::backend::format_csv;
use splatslam::camera::CameraModel;
use splatslam::config::RunConfig;
use splatslam::image::read_ppm;
use splatslam::map::{read_ply, write_ply};
use splatslam::metrics::{evaluate_trajectory, image_metrics, ImageMetrics};
use splatslam::pipeline::{self, PipelineOutput};
use splatslam::renderer;
use splatslam::sensor::{load_sequence, read_calibration, LoadConfig, CALIB_FILE};
use splatslam::sim::{generate_sequence, SimulationSpec, PLANE_CORRIDOR};
use splatslam::trajectory::{read_tum, write_tum};
use std::fmt;
use std::path::{Path, PathBuf};

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const KEYFRAMES_FILE: &str = "keyframes.txt";
pub const MAP_FILE: &str = "map.ply";
pub const LOSS_FILE: &str = "loss.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const REPORT_FILE: &str = "report.jsonl";

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or malformed input.
    BadInput(String),
    /// Tracking failed; partial outputs were written.
    TrackingLost(String),
    /// Failure writing outputs.
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::BadInput(_) => 2,
            CliError::TrackingLost(_) => 3,
            CliError::Output(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::BadInput(m) | CliError::TrackingLost(m) | CliError::Output(m) => f.write_str(m),
        }
    }
}

fn bad(e: impl fmt::Display) -> CliError {
    CliError::BadInput(e.to_string())
}

fn output(e: impl fmt::Display) -> CliError {
    CliError::Output(e.to_string())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| output(format!("cannot create {}: {e}", dir.display())))
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>, threads: Option<usize>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p).map_err(bad)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = threads {
        if t == 0 {
            return Err(bad("--threads must be at least 1"));
        }
        cfg.threads = t;
    }
    Ok(cfg)
}

pub fn simulate(spec: &str, noise: Option<f64>, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut sim = if spec == "plane-corridor" {
        SimulationSpec::parse(PLANE_CORRIDOR).map_err(bad)?
    } else {
        let path = Path::new(spec);
        SimulationSpec::from_file(path).map_err(|e| bad(format!("{}: {e}", path.display())))?
    };
    if let Some(s) = seed {
        sim = sim.with_seed(s);
    }
    if let Some(n) = noise {
        if !(n >= 0.0 && n.is_finite()) {
            return Err(bad("--noise must be a non-negative number"));
        }
        sim.lidar.noise_sigma = n;
    }
    create_dir(out)?;
    let n = generate_sequence(&sim.scene, &sim.trajectory, &sim.camera, &sim.lidar, out).map_err(output)?;
    log::info!("wrote {n} frames to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct LostSummary {
    frame: u32,
    reason: String,
}

#[derive(Serialize)]
struct Summary {
    frames: usize,
    keyframes: usize,
    primitives: usize,
    batches: usize,
    seconds: f64,
    fps: f64,
    seed: u64,
    threads: usize,
    keyframe_psnr: Vec<f64>,
    mean_keyframe_psnr: f64,
    lost: Option<LostSummary>,
}

fn write_outputs(run: &PipelineOutput, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    write_tum(&out.join(TRAJECTORY_FILE), &run.trajectory).map_err(output)?;
    write_tum(&out.join(KEYFRAMES_FILE), &run.keyframes).map_err(output)?;
    write_ply(&out.join(MAP_FILE), &run.map).map_err(output)?;
    let write = |name: &str, text: String| std::fs::write(out.join(name), text).map_err(|e| output(format!("{name}: {e}")));
    write(LOSS_FILE, format_csv(&run.log))?;
    write(CONFIG_FILE, cfg.to_text())?;
    let psnr = &run.keyframe_psnr;
    let summary = Summary {
        frames: run.frames,
        keyframes: run.keyframes.len(),
        primitives: run.map.len(),
        batches: run.log.iter().map(|r| r.batch).max().unwrap_or(0),
        seconds: run.seconds,
        fps: run.fps(),
        seed: cfg.seed,
        threads: cfg.threads,
        keyframe_psnr: psnr.clone(),
        mean_keyframe_psnr: if psnr.is_empty() { 0.0 } else { psnr.iter().sum::<f64>() / psnr.len() as f64 },
        lost: run.lost.as_ref().map(|l| LostSummary { frame: l.frame, reason: l.error.to_string() }),
    };
    write(SUMMARY_FILE, serde_json::to_string_pretty(&summary).map_err(output)? + "\n")
}

pub fn slam(dataset: &Path, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let reader = load_sequence(dataset, &LoadConfig { pairing_tolerance: cfg.pairing_tolerance }).map_err(bad)?;
    let cam = *reader.camera().ok_or_else(|| bad(format!("{}: no frames", dataset.display())))?;
    if reader.skipped() > 0 {
        log::warn!("{} images or scans had no partner and were skipped", reader.skipped());
    }
    let run = pipeline::run(reader, &cam, cfg).map_err(bad)?;
    write_outputs(&run, cfg, out)?;
    log::info!(
        "{} frames, {} keyframes, {} primitives in {:.1} s ({:.2} FPS)",
        run.frames,
        run.keyframes.len(),
        run.map.len(),
        run.seconds,
        run.fps()
    );
    match &run.lost {
        Some(l) => Err(CliError::TrackingLost(format!("frame {}: {}; partial outputs in {}", l.frame, l.error, out.display()))),
        None => Ok(()),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), CliError> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| bad(format!("--size {s:?}: expected WIDTHxHEIGHT")))?;
    match (w.trim().parse(), h.trim().parse()) {
        (Ok(w), Ok(h)) => Ok((w, h)),
        _ => Err(bad(format!("--size {s:?}: expected WIDTHxHEIGHT"))),
    }
}

/// Camera from a dataset directory or a bare calibration file.
fn camera_from(calib: &Path, size: Option<&str>) -> Result<CameraModel, CliError> {
    let dataset_cam = if calib.is_dir() {
        load_sequence(calib, &LoadConfig::default()).map_err(bad)?.camera().copied()
    } else {
        None
    };
    let file = if calib.is_dir() { calib.join(CALIB_FILE) } else { calib.to_path_buf() };
    let ([fx, fy, cx, cy], extrinsics) = read_calibration(&file).map_err(bad)?;
    let (w, h) = match (size, dataset_cam) {
        (Some(s), _) => parse_size(s)?,
        (None, Some(c)) => (c.width, c.height),
        (None, None) => ((2.0 * cx + 1.0).round() as usize, (2.0 * cy + 1.0).round() as usize),
    };
    Ok(CameraModel::new(fx, fy, cx, cy, w, h).map_err(bad)?.with_extrinsics(extrinsics))
}

pub fn render(map: &Path, poses: &Path, calib: &Path, size: Option<&str>, out: &Path) -> Result<(), CliError> {
    let prims = read_ply(map).map_err(bad)?;
    let poses = read_tum(poses).map_err(bad)?;
    let cam = camera_from(calib, size)?;
    create_dir(out)?;
    for (k, st) in poses.iter().enumerate() {
        let buf = renderer::render(&prims, &st.pose, &cam);
        buf.write_images(out, &format!("view_{k:05}")).map_err(output)?;
    }
    log::info!("rendered {} views of {} primitives", poses.len(), prims.len());
    Ok(())
}

#[derive(Serialize)]
struct ImageRow<'a> {
    kind: &'static str,
    name: &'a str,
    #[serde(flatten)]
    metrics: ImageMetrics,
}

fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| bad(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    Ok(files)
}

fn json_line(value: &impl Serialize) -> Result<String, CliError> {
    serde_json::to_string(value).map_err(output)
}

/// Trajectory files give one report line; image directories give one line
/// per image pair, matched in sorted name order, then a mean line.
pub fn eval(estimate: &Path, reference: &Path, out: &Path) -> Result<(), CliError> {
    let mut lines = Vec::new();
    if estimate.is_dir() || reference.is_dir() {
        let (a, b) = (ppm_files(estimate)?, ppm_files(reference)?);
        if a.len() != b.len() {
            return Err(bad(format!(
                "{} has {} images but {} has {}",
                estimate.display(),
                a.len(),
                reference.display(),
                b.len()
            )));
        }
        let mut sum = ImageMetrics { ssim: 0.0, psnr: 0.0, lpips: 0.0, composite: 0.0 };
        for (pa, pb) in a.iter().zip(&b) {
            let ia = read_ppm(pa).map_err(|e| bad(format!("{}: {e}", pa.display())))?;
            let ib = read_ppm(pb).map_err(|e| bad(format!("{}: {e}", pb.display())))?;
            let m = image_metrics(&ia, &ib).map_err(|e| bad(format!("{}: {e}", pa.display())))?;
            sum.ssim += m.ssim;
            sum.psnr += m.psnr;
            sum.lpips += m.lpips;
            sum.composite += m.composite;
            let name = pa.file_name().and_then(|n| n.to_str()).unwrap_or("?");
            lines.push(json_line(&ImageRow { kind: "image", name, metrics: m })?);
        }
        if !a.is_empty() {
            let n = a.len() as f64;
            let mean = ImageMetrics { ssim: sum.ssim / n, psnr: sum.psnr / n, lpips: sum.lpips / n, composite: sum.composite / n };
            lines.push(json_line(&ImageRow { kind: "image_mean", name: "*", metrics: mean })?);
        }
    } else {
        let est = read_tum(estimate).map_err(bad)?;
        let gt = read_tum(reference).map_err(bad)?;
        let m = evaluate_trajectory(&est, &gt).map_err(bad)?;
        let mut value = serde_json::to_value(m).map_err(output)?;
        value["kind"] = "trajectory".into();
        lines.push(json_line(&value)?);
    }
    create_dir(out)?;
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    print!("{text}");
    std::fs::write(out.join(REPORT_FILE), text).map_err(output)
}
