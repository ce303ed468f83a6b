//! Cross-modal distillation of a simulated LiDAR teacher into a monocular
//! student: autodiff numerics, projection and rendering, scene-level and
//! RoI-level feature imitation, response supervision from soft labels,
//! loss composition and detection metrics, plus a synthetic harness.

pub mod error;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod projection;
pub mod response;
pub mod roi_sim;
pub mod scene_sim;

pub use error::{Error, Result};
