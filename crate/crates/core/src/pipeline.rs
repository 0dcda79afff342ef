//! Full SLAM loop: normals, tracking, keyframe selection and the back-end.
//!
//! With one thread everything runs in order on the caller's thread, which
//! makes runs bit-reproducible. With more, the back-end runs on its own
//! thread fed by an ordered keyframe queue and publishes map snapshots
//! between operations; tracking always uses the latest snapshot.

use crate::backend::{Backend, KeyframeRecord, RoundLog};
use crate::camera::CameraModel;
use crate::config::RunConfig;
use crate::gaussian::GaussianPrimitive;
use crate::geometry::{PoseSE3, Vec3};
use crate::map::GaussianMap;
use crate::metrics::psnr;
use crate::renderer::render;
use crate::sensor::{estimate_normals, Frame, SensorError};
use crate::tracking::{covisibility, keyframe_decision, track_frame, TrackingError};
use crate::trajectory::Stamped;
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error("cannot build worker pool: {0}")]
    Threads(String),
}

/// Where and why tracking gave up.
#[derive(Debug)]
pub struct LostFrame {
    pub frame: u32,
    pub error: TrackingError,
}

#[derive(Debug)]
pub struct PipelineOutput {
    /// Front-end pose of every processed frame.
    pub trajectory: Vec<Stamped>,
    /// Keyframes with their back-end refined poses.
    pub keyframes: Vec<Stamped>,
    /// PSNR of the final map rendered at each keyframe against its image.
    pub keyframe_psnr: Vec<f64>,
    pub map: Vec<GaussianPrimitive>,
    pub log: Vec<RoundLog>,
    pub frames: usize,
    pub seconds: f64,
    pub lost: Option<LostFrame>,
}

impl PipelineOutput {
    /// Processed frames per wall-clock second.
    pub fn fps(&self) -> f64 {
        if self.seconds > 0.0 {
            self.frames as f64 / self.seconds
        } else {
            0.0
        }
    }
}

/// Attaches estimated normals in the LiDAR frame.
fn prepare(mut frame: Frame, cfg: &RunConfig) -> Result<Frame, TrackingError> {
    let (cloud, _) = estimate_normals(&frame.cloud, cfg.normal_k, &Vec3::zeros())
        .map_err(|e| TrackingError::TrackingLost { inliers: 0, reason: e.to_string() })?;
    frame.cloud = cloud;
    Ok(frame)
}

/// Front-end state shared by both execution modes.
struct FrontEnd<'a> {
    cfg: &'a RunConfig,
    cam: &'a CameraModel,
    trajectory: Vec<Stamped>,
    last_keyframe: Option<PoseSE3>,
}

impl FrontEnd<'_> {
    /// Tracks one frame; returns its pose and whether it is a keyframe.
    fn process(&mut self, frame: &Frame, map: &GaussianMap) -> Result<(PoseSE3, bool), TrackingError> {
        let Some(kf_pose) = self.last_keyframe else {
            // the first frame defines the world frame
            let pose = PoseSE3::identity();
            self.accept(frame, pose, true);
            return Ok((pose, true));
        };
        let init = self.trajectory.last().map_or(kf_pose, |s| s.pose);
        let result = track_frame(frame, map, &init, self.cam, &self.cfg.tracking())?;
        let covis = covisibility(map, &kf_pose, &result.pose, self.cam);
        let is_kf = keyframe_decision(covis, self.cfg.covisibility_threshold);
        log::debug!(
            "frame {}: {} iterations, {} inliers, covisibility {covis:.3}{}",
            frame.index,
            result.iterations,
            result.inlier_count,
            if is_kf { ", keyframe" } else { "" }
        );
        self.accept(frame, result.pose, is_kf);
        Ok((result.pose, is_kf))
    }

    fn accept(&mut self, frame: &Frame, pose: PoseSE3, is_kf: bool) {
        self.trajectory.push(Stamped { timestamp: frame.timestamp, pose });
        if is_kf {
            self.last_keyframe = Some(pose);
        }
    }
}

fn finish(backend: Backend, trajectory: Vec<Stamped>, frames: usize, start: Instant, lost: Option<LostFrame>) -> PipelineOutput {
    let keyframes = backend
        .keyframes
        .iter()
        .map(|k: &KeyframeRecord| Stamped { timestamp: k.frame.timestamp, pose: k.pose })
        .collect();
    let keyframe_psnr = backend
        .keyframes
        .iter()
        .map(|k| {
            let img = render(backend.map.primitives(), &k.pose, backend.camera()).color;
            psnr(&img, &k.frame.image).unwrap_or(0.0)
        })
        .collect();
    PipelineOutput {
        trajectory,
        keyframes,
        keyframe_psnr,
        map: backend.map.primitives().to_vec(),
        log: backend.log,
        frames,
        seconds: start.elapsed().as_secs_f64(),
        lost,
    }
}

/// Runs the pipeline over a frame stream. Sensor errors abort the run;
/// a lost track stops it early with everything up to that frame kept.
pub fn run<I>(frames: I, cam: &CameraModel, cfg: &RunConfig) -> Result<PipelineOutput, PipelineError>
where
    I: IntoIterator<Item = Result<Frame, SensorError>> + Send,
    I::IntoIter: Send,
{
    let threads = cfg.threads.max(1);
    if threads == 1 {
        pool(1)?.install(|| run_sequential(frames, cam, cfg))
    } else {
        // Separate pools: a worker blocked on the keyframe queue or on a
        // snapshot must never be holding a job of the other side.
        let front = threads / 2;
        run_threaded(frames, cam, cfg, pool(front)?, pool(threads - front)?)
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| PipelineError::Threads(e.to_string()))
}

fn run_sequential<I>(frames: I, cam: &CameraModel, cfg: &RunConfig) -> Result<PipelineOutput, PipelineError>
where
    I: IntoIterator<Item = Result<Frame, SensorError>>,
{
    let start = Instant::now();
    let mut backend = Backend::new(*cam, cfg.backend());
    let mut front = FrontEnd { cfg, cam, trajectory: Vec::new(), last_keyframe: None };
    let mut count = 0;
    let mut lost = None;
    for frame in frames {
        let frame = frame?;
        count += 1;
        let index = frame.index;
        let step = prepare(frame, cfg).and_then(|f| front.process(&f, &backend.map).map(|r| (f, r)));
        match step {
            Ok((f, (pose, true))) => {
                backend.step(f, pose);
            }
            Ok(_) => {}
            Err(error) => {
                log::error!("tracking lost at frame {index}: {error}");
                lost = Some(LostFrame { frame: index, error });
                break;
            }
        }
    }
    backend.flush();
    Ok(finish(backend, front.trajectory, count, start, lost))
}

/// Latest published map and how many keyframes it contains.
struct Snapshot {
    map: Arc<GaussianMap>,
    keyframes: usize,
}

fn run_threaded<I>(
    frames: I,
    cam: &CameraModel,
    cfg: &RunConfig,
    front_pool: rayon::ThreadPool,
    back_pool: rayon::ThreadPool,
) -> Result<PipelineOutput, PipelineError>
where
    I: IntoIterator<Item = Result<Frame, SensorError>> + Send,
    I::IntoIter: Send,
{
    let start = Instant::now();
    let shared = Arc::new((Mutex::new(Snapshot { map: Arc::new(GaussianMap::new()), keyframes: 0 }), Condvar::new()));
    let (tx, rx) = mpsc::channel::<(Frame, PoseSE3)>();
    let publish = |backend: &Backend, shared: &(Mutex<Snapshot>, Condvar)| {
        let mut s = shared.0.lock().expect("snapshot lock");
        *s = Snapshot { map: Arc::new(backend.map.clone()), keyframes: backend.keyframes.len() };
        shared.1.notify_all();
    };
    std::thread::scope(|scope| {
        let back_shared = Arc::clone(&shared);
        let back_cam = *cam;
        let back_params = cfg.backend();
        let worker = scope.spawn(move || {
            back_pool.install(|| {
                let mut backend = Backend::new(back_cam, back_params);
                for (frame, pose) in rx {
                    backend.insert(frame, pose);
                    publish(&backend, &back_shared);
                    if backend.optimize_if_ready().is_some() {
                        publish(&backend, &back_shared);
                    }
                }
                backend.flush();
                publish(&backend, &back_shared);
                backend
            })
        });
        let mut front = FrontEnd { cfg, cam, trajectory: Vec::new(), last_keyframe: None };
        let mut count = 0;
        let mut lost = None;
        let mut sent = 0usize;
        let mut failure = None;
        front_pool.install(|| {
            for frame in frames {
                let frame = match frame {
                    Ok(f) => f,
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                };
                count += 1;
                let index = frame.index;
                // tracking needs at least the first keyframe in the map
                let map = {
                    let guard = shared.0.lock().expect("snapshot lock");
                    let guard = shared.1.wait_while(guard, |s| sent > 0 && s.keyframes == 0).expect("snapshot lock");
                    Arc::clone(&guard.map)
                };
                match prepare(frame, cfg).and_then(|f| front.process(&f, &map).map(|r| (f, r))) {
                    Ok((f, (pose, true))) => {
                        sent += 1;
                        tx.send((f, pose)).expect("back-end alive");
                    }
                    Ok(_) => {}
                    Err(error) => {
                        log::error!("tracking lost at frame {index}: {error}");
                        lost = Some(LostFrame { frame: index, error });
                        break;
                    }
                }
            }
        });
        drop(tx);
        let backend = worker.join().expect("back-end thread panicked");
        match failure {
            Some(e) => Err(PipelineError::Sensor(e)),
            None => Ok(finish(backend, front.trajectory, count, start, lost)),
        }
    })
}
