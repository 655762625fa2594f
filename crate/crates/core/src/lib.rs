//! Uncertainty-guided autonomous reconstruction on a procedural scene.
//!
//! An implicit field learns color, density and color variance from RGBD
//! views of an SDF scene. Rendered variance acts as a view-quality proxy,
//! and a greedy next-best-view planner picks the most uncertain reachable
//! viewpoint at each step.

pub mod camera;
pub mod error;
pub mod field;
pub mod geom;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod planner;
pub mod render;
pub mod scene;
pub mod train;

pub use camera::{CameraIntrinsics, Viewpoint};
pub use error::{Error, Result};
pub use field::{FieldConfig, FieldOutput, FieldParams};
pub use geom::{Aabb, Mat3, Vec3};
pub use render::{RenderSettings, RenderedView};
pub use scene::{DepthNoiseModel, RgbdImage, SceneSdf};
pub use train::{Formulation, LossBreakdown, TrainConfig, Trainer};
