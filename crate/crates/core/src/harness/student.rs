//! Toy monocular student: a convolutional trunk, image-space scene heads,
//! RoI heads lifted onto a bird's-eye grid by depth, and an anchor-based
//! prediction head. Alignment heads and fusion weights sit beside the
//! detector and never enter its inference path.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::HarnessConfig;
use super::scene::{SyntheticScene, IMAGE_CHANNELS};
use super::teacher::{TeacherOutput, ROI_FEATURES, SCENE_FEATURES};
use crate::error::{Error, Result};
use crate::metrics::{bev_iou, FusionWeights};
use crate::numerics::{Bound, FeatureMap, ParameterSet, ScatterMean, Tape, Tensor, Var};
use crate::projection::ValidityMask;
use crate::response::{Anchor, DetectionBox, ObjectClass, SoftLabelSet, BOX_PARAMS};
use crate::roi_sim::{cell_index, roi_teacher_map, Bounds, BoundsPolicy, GridDims};
use crate::scene_sim::{AlignmentHead, HeadMode};

/// Initial objectness probability of every anchor.
const OBJECTNESS_PRIOR: f64 = 0.01;
/// Standard deviation of the initial output-layer weights.
const OUTPUT_INIT_STD: f64 = 0.01;

/// Bird's-eye grid shared by the teacher's voxelization and the student's
/// depth lift. World frame: x forward, y left, z up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub bounds: Bounds,
    pub dims: GridDims,
    pub camera_height: f64,
}

impl BevGrid {
    /// Covers the scene area with one metre of margin (two in depth) and
    /// heights from just below the ground to 2.5 m.
    pub fn from_config(cfg: &HarnessConfig) -> Result<Self> {
        let bounds = Bounds::new(
            [cfg.depth_min - 2.0, -cfg.lateral_max - 1.0, -0.1],
            [cfg.depth_max + 2.0, -cfg.lateral_min + 1.0, 2.5],
        )?;
        Ok(Self {
            bounds,
            dims: GridDims::new(cfg.bev_cells, cfg.bev_cells, cfg.bev_height_cells)?,
            camera_height: cfg.camera_height,
        })
    }

    pub fn cells(&self) -> usize {
        self.dims.x * self.dims.y
    }

    /// One car-sized anchor resting on the ground at each cell centre,
    /// indexed `x·Y + y` like the BEV maps.
    pub fn anchors(&self) -> Vec<Anchor> {
        let size_x = (self.bounds.max[0] - self.bounds.min[0]) / self.dims.x as f64;
        let size_y = (self.bounds.max[1] - self.bounds.min[1]) / self.dims.y as f64;
        let mut anchors = Vec::with_capacity(self.cells());
        for ix in 0..self.dims.x {
            for iy in 0..self.dims.y {
                let forward = self.bounds.min[0] + (ix as f64 + 0.5) * size_x;
                let left = self.bounds.min[1] + (iy as f64 + 0.5) * size_y;
                anchors.push(Anchor {
                    location: [-left, self.camera_height, forward],
                    dimensions: [1.5, 1.6, 3.9],
                    yaw: 0.0,
                });
            }
        }
        anchors
    }

    /// Averages each image pixel into the BEV cell below its back-projected
    /// hit point. Pixels without depth or outside the grid are dropped.
    pub fn lift(&self, scene: &SyntheticScene) -> Result<ScatterMean> {
        let w = scene.width();
        let targets = scene
            .depth
            .iter()
            .enumerate()
            .map(|(p, d)| {
                d.and_then(|d| {
                    let cam = scene.camera.back_project((p % w) as f64, (p / w) as f64, d);
                    cell_index(&self.bounds, self.dims, scene.camera.camera_to_world(cam))
                        .map(|[ix, iy, _]| ix * self.dims.y + iy)
                })
            })
            .collect();
        ScatterMean::new(targets, self.dims.x, self.dims.y)
    }

    /// Teacher RoI map on this grid and its validity mask.
    pub fn teacher_roi_map(&self, teacher: &TeacherOutput) -> Result<(FeatureMap, ValidityMask)> {
        roi_teacher_map(
            &teacher.roi_union()?,
            self.dims,
            BoundsPolicy::Fixed(self.bounds),
            self.dims.x,
            self.dims.y,
        )
    }
}

/// Candidate filtering applied to raw anchor predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl From<&HarnessConfig> for DecodeConfig {
    fn from(c: &HarnessConfig) -> Self {
        Self {
            score_threshold: c.score_threshold,
            nms_iou: c.nms_iou,
            max_detections: c.max_detections,
        }
    }
}

/// Confidence-ordered greedy suppression: a box is dropped when its BEV IoU
/// with an already kept box exceeds `cfg.nms_iou`.
pub fn non_maximum_suppression(mut boxes: Vec<DetectionBox>, cfg: &DecodeConfig) -> Vec<DetectionBox> {
    boxes.retain(|b| b.confidence >= cfg.score_threshold);
    boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<DetectionBox> = Vec::new();
    for b in boxes {
        if kept.len() == cfg.max_detections {
            break;
        }
        if kept.iter().all(|k| bev_iou(k, &b) <= cfg.nms_iou) {
            kept.push(b);
        }
    }
    kept
}

/// Anything that turns a scene into scored boxes.
pub trait Detector {
    fn detect(&self, scene: &SyntheticScene) -> Result<SoftLabelSet>;
}

/// Which parts of the detector a forward pass records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// Prediction path only.
    Inference,
    /// Prediction path plus every feature head used for imitation.
    Training,
}

/// Tape handles produced by one detector pass.
#[derive(Debug, Clone, Copy)]
pub struct DetectorOutputs {
    /// Image-space scene features, `C×H×W`.
    pub scene_global: Option<Var>,
    pub scene_local: Option<Var>,
    /// BEV RoI features, `C×X×Y`.
    pub roi_global: Var,
    pub roi_local: Option<Var>,
    /// `7×X×Y` additive residuals over the anchors.
    pub residuals: Var,
    /// `1×X×Y` objectness probabilities.
    pub objectness: Var,
}

/// Student feature maps fed to the alignment heads.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFeatures {
    pub scene_global: FeatureMap,
    pub scene_local: Option<FeatureMap>,
    pub roi_global: FeatureMap,
    pub roi_local: Option<FeatureMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentDetector {
    params: ParameterSet,
    trunk_channels: usize,
    scene_channels: usize,
    roi_channels: usize,
    branch_pair: bool,
}

impl StudentDetector {
    pub fn new<R: Rng + ?Sized>(cfg: &HarnessConfig, rng: &mut R) -> Self {
        let (t, s, r, b) = (cfg.trunk_channels, cfg.scene_channels, cfg.roi_channels, cfg.bev_channels);
        let mut params = ParameterSet::new();
        let mut conv = |name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut R| {
            params.insert_fan_in_uniform(format!("{name}.weight"), vec![c_out, c_in, k, k], c_in * k * k, rng);
            params.insert(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
        };
        conv("trunk1", t, IMAGE_CHANNELS, 3, rng);
        conv("trunk2", t, t, 3, rng);
        conv("scene_global", s, t, 1, rng);
        conv("roi_global", r, t, 1, rng);
        if cfg.branch_pair {
            conv("scene_local", s, t, 3, rng);
            conv("roi_local", r, t, 3, rng);
        }
        conv("bev", b, r, 3, rng);
        // near-zero output layers: every anchor starts at the prior with
        // zero residual
        let normal = Normal::new(0.0, OUTPUT_INIT_STD).expect("valid deviation");
        for (name, c_out) in [("objectness", 1), ("regression", BOX_PARAMS)] {
            let data = (0..c_out * b).map(|_| normal.sample(rng)).collect();
            params.insert(format!("{name}.weight"), Tensor::new(vec![c_out, b, 1, 1], data).expect("sized"));
            params.insert(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
        }
        let prior_logit = (OBJECTNESS_PRIOR / (1.0 - OBJECTNESS_PRIOR)).ln();
        params.insert("objectness.bias", Tensor::filled(vec![1], prior_logit));
        Self {
            params,
            trunk_channels: t,
            scene_channels: s,
            roi_channels: r,
            branch_pair: cfg.branch_pair,
        }
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn branch_pair(&self) -> bool {
        self.branch_pair
    }

    pub fn scene_channels(&self) -> usize {
        self.scene_channels
    }

    pub fn roi_channels(&self) -> usize {
        self.roi_channels
    }

    pub fn trunk_channels(&self) -> usize {
        self.trunk_channels
    }

    fn conv(&self, tape: &mut Tape, bound: &Bound, name: &str, input: Var) -> Result<Var> {
        tape.conv2d(input, bound.var(&format!("{name}.weight")), bound.var(&format!("{name}.bias")))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        image: Var,
        lift: &Rc<ScatterMean>,
        pass: Pass,
    ) -> Result<DetectorOutputs> {
        let x = self.conv(tape, bound, "trunk1", image)?;
        let x = tape.relu(x);
        let x = self.conv(tape, bound, "trunk2", x)?;
        let trunk = tape.relu(x);

        let roi_image = self.conv(tape, bound, "roi_global", trunk)?;
        let roi_global = tape.scatter_mean(roi_image, Rc::clone(lift))?;
        let bev = self.conv(tape, bound, "bev", roi_global)?;
        let bev = tape.relu(bev);
        let logits = self.conv(tape, bound, "objectness", bev)?;
        let objectness = tape.sigmoid(logits);
        let residuals = self.conv(tape, bound, "regression", bev)?;

        let mut out = DetectorOutputs {
            scene_global: None,
            scene_local: None,
            roi_global,
            roi_local: None,
            residuals,
            objectness,
        };
        if pass == Pass::Training {
            out.scene_global = Some(self.conv(tape, bound, "scene_global", trunk)?);
            if self.branch_pair {
                out.scene_local = Some(self.conv(tape, bound, "scene_local", trunk)?);
                let local = self.conv(tape, bound, "roi_local", trunk)?;
                out.roi_local = Some(tape.scatter_mean(local, Rc::clone(lift))?);
            }
        }
        Ok(out)
    }

    /// Feature maps of every imitation branch, computed outside training.
    pub fn branch_features(&self, scene: &SyntheticScene, grid: &BevGrid) -> Result<BranchFeatures> {
        let lift = Rc::new(grid.lift(scene)?);
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let image = tape.constant(scene.image.to_tensor());
        let out = self.forward(&mut tape, &bound, image, &lift, Pass::Training)?;
        let map = |v: Var| FeatureMap::from_tensor(tape.value(v).clone());
        Ok(BranchFeatures {
            scene_global: map(out.scene_global.expect("training pass"))?,
            scene_local: out.scene_local.map(map).transpose()?,
            roi_global: map(out.roi_global)?,
            roi_local: out.roi_local.map(map).transpose()?,
        })
    }

    /// Raw per-anchor predictions `(residuals [7·A], objectness [A])`.
    pub fn predict(&self, scene: &SyntheticScene, grid: &BevGrid) -> Result<(Tensor, Tensor)> {
        let lift = Rc::new(grid.lift(scene)?);
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let image = tape.constant(scene.image.to_tensor());
        let out = self.forward(&mut tape, &bound, image, &lift, Pass::Inference)?;
        Ok((tape.value(out.residuals).clone(), tape.value(out.objectness).clone()))
    }
}

/// Heads mapping student features onto the teacher's channel widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentHeads {
    pub scene_global: AlignmentHead,
    pub scene_local: Option<AlignmentHead>,
    pub roi_global: AlignmentHead,
    pub roi_local: Option<AlignmentHead>,
}

impl AlignmentHeads {
    pub fn new<R: Rng + ?Sized>(detector: &StudentDetector, rng: &mut R) -> Self {
        let (s, r) = (detector.scene_channels, detector.roi_channels);
        let scene_global = AlignmentHead::new(s, SCENE_FEATURES, rng);
        let roi_global = AlignmentHead::new(r, ROI_FEATURES, rng);
        let (scene_local, roi_local) = if detector.branch_pair {
            (
                Some(AlignmentHead::new(s, SCENE_FEATURES, rng)),
                Some(AlignmentHead::new(r, ROI_FEATURES, rng)),
            )
        } else {
            (None, None)
        };
        Self {
            scene_global,
            scene_local,
            roi_global,
            roi_local,
        }
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut AlignmentHead> {
        [
            Some(&mut self.scene_global),
            self.scene_local.as_mut(),
            Some(&mut self.roi_global),
            self.roi_local.as_mut(),
        ]
        .into_iter()
        .flatten()
    }

    pub fn set_mode(&mut self, mode: HeadMode) {
        self.iter_mut().for_each(|h| h.set_mode(mode));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentModel {
    pub detector: StudentDetector,
    /// Training-only; removing it leaves inference unchanged.
    pub alignment: Option<AlignmentHeads>,
    /// Scalars `raw_alpha` and `raw_beta`.
    pub fusion: ParameterSet,
    pub grid: BevGrid,
    pub decode: DecodeConfig,
}

impl StudentModel {
    pub fn new<R: Rng + ?Sized>(cfg: &HarnessConfig, rng: &mut R) -> Result<Self> {
        let detector = StudentDetector::new(cfg, rng);
        let alignment = Some(AlignmentHeads::new(&detector, rng));
        let init = FusionWeights::default();
        let mut fusion = ParameterSet::new();
        fusion.insert("raw_alpha", Tensor::scalar(init.raw_alpha));
        fusion.insert("raw_beta", Tensor::scalar(init.raw_beta));
        Ok(Self {
            detector,
            alignment,
            fusion,
            grid: BevGrid::from_config(cfg)?,
            decode: DecodeConfig::from(cfg),
        })
    }

    pub fn fusion_weights(&self) -> FusionWeights {
        FusionWeights {
            raw_alpha: self.fusion.value("raw_alpha").item(),
            raw_beta: self.fusion.value("raw_beta").item(),
        }
    }

    /// The same detector with the alignment heads deleted.
    pub fn without_alignment(&self) -> Self {
        Self {
            alignment: None,
            ..self.clone()
        }
    }

    /// Decoded boxes before suppression, one per anchor.
    pub fn raw_detections(&self, scene: &SyntheticScene) -> Result<Vec<DetectionBox>> {
        let (residuals, objectness) = self.detector.predict(scene, &self.grid)?;
        let anchors = self.grid.anchors();
        let a = anchors.len();
        if objectness.len() != a {
            return Err(Error::shape("student objectness", a, objectness.len()));
        }
        let r = residuals.data();
        Ok(anchors
            .iter()
            .enumerate()
            .map(|(i, anchor)| {
                let res: Vec<f64> = (0..BOX_PARAMS).map(|k| r[k * a + i]).collect();
                anchor.decode(&res, ObjectClass::Car, objectness.data()[i])
            })
            .collect())
    }
}

impl Detector for StudentModel {
    fn detect(&self, scene: &SyntheticScene) -> Result<SoftLabelSet> {
        let boxes = non_maximum_suppression(self.raw_detections(scene)?, &self.decode);
        Ok(SoftLabelSet::new(scene.frame_id, boxes))
    }
}

/// Reports the ground truth with confidence 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleDetector;

impl Detector for OracleDetector {
    fn detect(&self, scene: &SyntheticScene) -> Result<SoftLabelSet> {
        Ok(SoftLabelSet::new(scene.frame_id, scene.boxes.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scene::{generate_scene, SceneConfig};
    use crate::numerics::seeded_rng;

    #[test]
    fn anchors_follow_map_layout() {
        let grid = BevGrid::from_config(&HarnessConfig::default()).unwrap();
        let anchors = grid.anchors();
        let n = grid.dims.y;
        assert_eq!(anchors.len(), grid.dims.x * n);
        // x grows with the first index (depth), camera x falls with the second
        assert!(anchors[n].location[2] > anchors[0].location[2]);
        assert!(anchors[1].location[0] < anchors[0].location[0]);
        for a in &anchors {
            let world = [a.location[2], -a.location[0], 0.0];
            let [ix, iy, _] = cell_index(&grid.bounds, grid.dims, world).unwrap();
            assert!(std::ptr::eq(a, &anchors[ix * n + iy]));
        }
    }

    #[test]
    fn lift_lands_box_pixels_in_box_cells() {
        let cfg = HarnessConfig::default();
        let grid = BevGrid::from_config(&cfg).unwrap();
        let scene = generate_scene(7, 0, &SceneConfig::from(&cfg)).unwrap();
        let lift = grid.lift(&scene).unwrap();
        assert_eq!(lift.input_pixels(), scene.width() * scene.height());
        assert!(lift.counts().iter().sum::<usize>() > 0);
    }

    #[test]
    fn inference_shapes() {
        let cfg = HarnessConfig::default();
        let mut rng = seeded_rng(0);
        let student = StudentModel::new(&cfg, &mut rng).unwrap();
        let scene = generate_scene(1, 0, &SceneConfig::from(&cfg)).unwrap();
        let (res, obj) = student.detector.predict(&scene, &student.grid).unwrap();
        let n = cfg.bev_cells;
        assert_eq!(res.shape(), [7, n, n]);
        assert_eq!(obj.shape(), [1, n, n]);
        let dets = student.detect(&scene).unwrap();
        assert!(dets.len() <= cfg.max_detections);
        assert!(dets.boxes.windows(2).all(|w| w[0].confidence >= w[1].confidence));
    }

    #[test]
    fn suppression_keeps_best_of_overlapping_pair() {
        let b = |x: f64, c: f64| DetectionBox::new(ObjectClass::Car, [x, 1.65, 10.0], [1.5, 1.6, 3.9], 0.0, c).unwrap();
        let cfg = DecodeConfig {
            score_threshold: 0.2,
            nms_iou: 0.1,
            max_detections: 10,
        };
        let kept = non_maximum_suppression(vec![b(0.0, 0.5), b(0.2, 0.9), b(8.0, 0.4), b(20.0, 0.1)], &cfg);
        let confs: Vec<f64> = kept.iter().map(|k| k.confidence).collect();
        assert_eq!(confs, vec![0.9, 0.4]);
    }
}
