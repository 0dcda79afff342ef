//! LiDAR-visual SLAM on a map of anisotropic 3D Gaussians.
//!
//! The front-end registers LiDAR sweeps against the Gaussian map with a
//! density-weighted point-to-plane objective; the back-end refines keyframe
//! poses and the map through a differentiable alpha-compositing renderer.

pub mod backend;
pub mod camera;
pub mod config;
pub mod gaussian;
pub mod geometry;
pub mod image;
pub mod kdtree;
pub mod map;
pub mod metrics;
pub mod pipeline;
pub mod renderer;
pub mod sensor;
pub mod sim;
pub mod tracking;
pub mod trajectory;

pub use camera::CameraModel;
pub use gaussian::{GaussianPrimitive, Origin};
pub use geometry::{PoseSE3, Vec3, Vec6};
pub use map::GaussianMap;
pub use sensor::{Frame, PointCloud};
