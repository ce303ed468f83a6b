//! World→pixel projection, nearest-depth rendering of point features and
//! validity masks.

mod camera;
mod render;

pub use camera::{CameraModel, RigidTransform};
pub use render::{
    compute_validity_mask, count_valid, render_points, PointFeatureSet, ValidityMask, MIN_DEPTH,
};
