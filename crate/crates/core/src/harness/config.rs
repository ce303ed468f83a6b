//! Harness configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{LossWeights, RecallSet};
use crate::response::ThresholdPolicy;

/// Everything a training or evaluation run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    /// Training scenes, visited cyclically one per step.
    pub train_scenes: usize,
    pub eval_scenes: usize,

    pub min_boxes: usize,
    pub max_boxes: usize,
    pub lateral_min: f64,
    pub lateral_max: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub points_per_box: usize,
    pub ground_points: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub focal_length: f64,
    pub camera_height: f64,
    pub max_placement_attempts: usize,
    pub teacher_noise: f64,

    pub trunk_channels: usize,
    pub scene_channels: usize,
    pub roi_channels: usize,
    /// Width of the BEV layer feeding the prediction head.
    pub bev_channels: usize,
    pub branch_pair: bool,
    pub bev_cells: usize,
    pub bev_height_cells: usize,

    pub lambda_scene: f64,
    pub lambda_roi: f64,
    pub car_threshold: f64,
    pub pedestrian_threshold: f64,
    pub cyclist_threshold: f64,

    pub eval_iou: f64,
    pub recall_set: RecallSet,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 500,
            learning_rate: 1e-2,
            train_scenes: 25,
            eval_scenes: 20,

            min_boxes: 1,
            max_boxes: 4,
            lateral_min: -12.0,
            lateral_max: 12.0,
            depth_min: 6.0,
            depth_max: 28.0,
            points_per_box: 120,
            ground_points: 600,
            image_height: 32,
            image_width: 64,
            focal_length: 48.0,
            camera_height: 1.65,
            max_placement_attempts: 1000,
            teacher_noise: 0.05,

            trunk_channels: 16,
            scene_channels: 8,
            roi_channels: 8,
            bev_channels: 16,
            branch_pair: true,
            bev_cells: 32,
            bev_height_cells: 8,

            lambda_scene: 1.0,
            lambda_roi: 1.0,
            car_threshold: 0.7,
            pedestrian_threshold: 0.0,
            cyclist_threshold: 0.0,

            eval_iou: 0.5,
            recall_set: RecallSet::R40,
            score_threshold: 0.0,
            nms_iou: 0.1,
            max_detections: 20,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident),* $(,)?) => {
        impl HarnessConfig {
            /// Every recognised key, in canonical order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = value.parse().map_err(|_| Error::Parse {
                            line,
                            message: format!("invalid value `{value}` for `{key}`"),
                        })?;
                    })*
                    _ => {
                        return Err(Error::Parse {
                            line,
                            message: format!("unknown key `{key}`"),
                        })
                    }
                }
                Ok(())
            }

            /// The configuration as `key = value` lines.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(writeln!(out, "{} = {}", stringify!($key), self.$key).expect("writing to a String");)*
                out
            }
        }
    };
}

config_keys!(
    seed,
    steps,
    learning_rate,
    train_scenes,
    eval_scenes,
    min_boxes,
    max_boxes,
    lateral_min,
    lateral_max,
    depth_min,
    depth_max,
    points_per_box,
    ground_points,
    image_height,
    image_width,
    focal_length,
    camera_height,
    max_placement_attempts,
    teacher_noise,
    trunk_channels,
    scene_channels,
    roi_channels,
    bev_channels,
    branch_pair,
    bev_cells,
    bev_height_cells,
    lambda_scene,
    lambda_roi,
    car_threshold,
    pedestrian_threshold,
    cyclist_threshold,
    eval_iou,
    recall_set,
    score_threshold,
    nms_iou,
    max_detections,
);

impl HarnessConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// blank lines are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim(), i + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.train_scenes == 0 {
            return fail("train_scenes must be positive".into());
        }
        if self.min_boxes > self.max_boxes {
            return fail(format!(
                "box-count range [{}, {}] is empty",
                self.min_boxes, self.max_boxes
            ));
        }
        if !(self.lateral_min < self.lateral_max) || !(self.depth_min < self.depth_max) || self.depth_min <= 0.0 {
            return fail("scene area must have lateral_min < lateral_max and 0 < depth_min < depth_max".into());
        }
        if self.points_per_box < 20 {
            return fail(format!("points_per_box must be at least 20, got {}", self.points_per_box));
        }
        if self.image_height == 0 || self.image_width == 0 || self.focal_length <= 0.0 {
            return fail("image size and focal length must be positive".into());
        }
        if !(self.camera_height > 0.0) {
            return fail("camera_height must be positive".into());
        }
        if !(self.teacher_noise >= 0.0) {
            return fail("teacher_noise must be non-negative".into());
        }
        if self.trunk_channels == 0 || self.scene_channels == 0 || self.roi_channels == 0 || self.bev_channels == 0 {
            return fail("channel widths must be positive".into());
        }
        if self.bev_cells == 0 || self.bev_height_cells == 0 {
            return fail("BEV grid sizes must be positive".into());
        }
        LossWeights::new(self.lambda_scene, self.lambda_roi)?;
        self.threshold_policy()?;
        if !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) {
            return fail(format!("eval_iou must lie in (0, 1], got {}", self.eval_iou));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return fail("score_threshold and nms_iou must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            scene: self.lambda_scene,
            roi: self.lambda_roi,
        }
    }

    pub fn threshold_policy(&self) -> Result<ThresholdPolicy> {
        ThresholdPolicy::new(self.car_threshold, self.pedestrian_threshold, self.cyclist_threshold)
    }

    /// Response-only ablation: both imitation weights zero.
    pub fn response_only(&self) -> Self {
        Self {
            lambda_scene: 0.0,
            lambda_roi: 0.0,
            ..self.clone()
        }
    }
}
