//! Frozen analytic teacher: geometric point features and visibility-scored
//! box predictions.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scene::{Surface, SyntheticScene, DEPTH_SCALE};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, seeded_rng};
use crate::projection::PointFeatureSet;
use crate::response::{DetectionBox, SoftLabelSet};

/// Channels of the teacher's scene-level point features.
pub const SCENE_FEATURES: usize = 16;
/// Channels of the teacher's RoI-level point features.
pub const ROI_FEATURES: usize = 16;

const NOISE_STREAM: u64 = 0x7e4c;
const CONFIDENCE_JITTER: f64 = 0.05;
const HEIGHT_CENTRES: [f64; 7] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5];
const HEIGHT_WIDTH: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherOutput {
    /// Features of every visible point, world coordinates.
    pub scene: PointFeatureSet,
    /// Visible points of each ground-truth box, in box order.
    pub roi: Vec<PointFeatureSet>,
    pub predictions: SoftLabelSet,
}

impl TeacherOutput {
    /// All RoI points as one set.
    pub fn roi_union(&self) -> Result<PointFeatureSet> {
        PointFeatureSet::concat(ROI_FEATURES, &self.roi)
    }
}

fn height_basis(h: f64) -> impl Iterator<Item = f64> {
    HEIGHT_CENTRES
        .iter()
        .map(move |c| (-(h - c).powi(2) / (2.0 * HEIGHT_WIDTH * HEIGHT_WIDTH)).exp())
}

fn scene_feature(height: f64, normal_z: f64, member: bool, depth: f64) -> Vec<f64> {
    let m = if member { 1.0 } else { 0.0 };
    let h = (height / 2.0).clamp(0.0, 1.0);
    let mut f = vec![
        1.0,
        m,
        h,
        normal_z,
        m * h,
        1.0 - m,
        depth / DEPTH_SCALE,
        m * (1.0 - normal_z),
        m * normal_z,
    ];
    f.extend(height_basis(height));
    f
}

fn roi_feature(b: &DetectionBox, p: [f64; 3], height: f64, normal_z: f64) -> Vec<f64> {
    let (x0, _, z0, _) = b.bev_footprint();
    let [h, w, l] = b.dimensions;
    let mut f = vec![
        1.0,
        ((p[0] - x0) / l).clamp(0.0, 1.0),
        ((p[2] - z0) / w).clamp(0.0, 1.0),
        (height / h).clamp(0.0, 1.0),
        h / 2.0,
        w / 2.0,
        l / 4.0,
        normal_z,
        p[2] / DEPTH_SCALE,
    ];
    f.extend(height_basis(height));
    f
}

/// Fraction of a box's camera-facing points that are visible; 0 for a box
/// without such points.
pub fn visibility_fraction(scene: &SyntheticScene, box_index: usize) -> f64 {
    let facing = scene
        .points
        .iter()
        .filter(|p| p.box_index == Some(box_index) && p.surface == Surface::Front);
    let (seen, total) = facing.fold((0usize, 0usize), |(s, t), p| (s + p.visible as usize, t + 1));
    if total == 0 {
        0.0
    } else {
        seen as f64 / total as f64
    }
}

/// Deterministic teacher pass. Predictions are the ground-truth boxes with
/// centres perturbed by `N(0, noise_sigma²)` per axis and confidence
/// `clamp(visibility + U(-0.05, 0.05), 0, 1)`, seeded from the scene.
pub fn teacher_forward(scene: &SyntheticScene, noise_sigma: f64) -> Result<TeacherOutput> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid(format!("teacher noise must be non-negative, got {noise_sigma}")));
    }
    let mut scene_points = PointFeatureSet::empty(SCENE_FEATURES);
    let mut roi: Vec<PointFeatureSet> = scene.boxes.iter().map(|_| PointFeatureSet::empty(ROI_FEATURES)).collect();
    for (i, p) in scene.points.iter().enumerate().filter(|(_, p)| p.visible) {
        let q = scene.camera_point(i);
        scene_points.push(&scene_feature(p.height, p.normal_z, p.box_index.is_some(), q[2]), p.position)?;
        if let Some(b) = p.box_index {
            roi[b].push(&roi_feature(&scene.boxes[b], q, p.height, p.normal_z), p.position)?;
        }
    }

    let mut rng = seeded_rng(derive_seed(scene.seed, NOISE_STREAM));
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut boxes = Vec::with_capacity(scene.boxes.len());
    for (i, gt) in scene.boxes.iter().enumerate() {
        let jitter = rng.random_range(-CONFIDENCE_JITTER..=CONFIDENCE_JITTER);
        let confidence = (visibility_fraction(scene, i) + jitter).clamp(0.0, 1.0);
        let mut b = gt.clone();
        for v in b.location.iter_mut() {
            *v += normal.sample(&mut rng);
        }
        b.confidence = confidence;
        boxes.push(b);
    }
    Ok(TeacherOutput {
        scene: scene_points,
        roi,
        predictions: SoftLabelSet::new(scene.frame_id, boxes),
    })
}

/// SHA-256 over the serialized teacher outputs, hex encoded.
pub fn teacher_checksum(outputs: &[TeacherOutput]) -> Result<String> {
    let bytes = serde_json::to_vec(outputs)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
