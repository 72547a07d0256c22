//! Differentiable Gaussian splatting with GaussianFlow.
//!
//! The crate renders color, depth, silhouette and GaussianFlow (the projected
//! inter-frame motion of 3D Gaussians), evaluates a robust log-logistic flow loss
//! plus photometric and regularizing losses, and backpropagates all of them to
//! Gaussian parameters and camera poses with closed-form gradients.

pub mod backward;
pub mod camera;
pub mod config;
pub mod error;
pub mod flow;
pub mod gaussian;
pub mod manage;
pub mod grid;
pub mod se3;
pub mod splat;
pub mod symmat2;
pub mod numeric;
pub mod objectives;
pub mod robustflow;

pub use camera::{CameraIntrinsics, Keyframe};
pub use config::{LearningRates, LossConfig, ManagementConfig};
pub use error::{Error, Result};
pub use flow::FlowField;
pub use gaussian::{covariance3d, Gaussian3D};
pub use grid::{Grid, RgbImage, ScalarMap, VectorMap};
pub use se3::{pose_retract, se3_exp, PoseSE3, Tangent};
pub use splat::{rasterize, rasterize_flow, GaussianMap, RenderOutputs};
