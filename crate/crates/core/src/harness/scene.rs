//! Synthetic driving scenes: cuboid cars on a ground plane, a LiDAR-like
//! point cloud and a small ray-cast camera image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::HarnessConfig;
use crate::error::{Error, Result};
use crate::metrics::bev_iou;
use crate::numerics::{seeded_rng, FeatureMap};
use crate::projection::{CameraModel, RigidTransform, MIN_DEPTH};
use crate::response::{DetectionBox, ObjectClass};

/// Depth normalisation shared by the image and the teacher features.
pub const DEPTH_SCALE: f64 = 30.0;

/// Channels of the student input image: depth, intensity, semantic.
pub const IMAGE_CHANNELS: usize = 3;

/// Minimum BEV gap kept between neighbouring boxes.
const BOX_GAP: f64 = 0.2;

/// Which surface a sampled point lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Surface {
    Ground,
    Top,
    /// The side facing the camera.
    Front,
    Back,
    Side,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePoint {
    /// World frame: x forward, y left, z up, ground at `z = 0`.
    pub position: [f64; 3],
    pub height: f64,
    pub normal_z: f64,
    pub box_index: Option<usize>,
    pub surface: Surface,
    /// In front of the camera, inside the image and not occluded.
    pub visible: bool,
}

/// Scene generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub lateral: (f64, f64),
    pub depth: (f64, f64),
    pub points_per_box: usize,
    pub ground_points: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub focal_length: f64,
    pub camera_height: f64,
    pub max_placement_attempts: usize,
}

impl From<&HarnessConfig> for SceneConfig {
    fn from(c: &HarnessConfig) -> Self {
        Self {
            min_boxes: c.min_boxes,
            max_boxes: c.max_boxes,
            lateral: (c.lateral_min, c.lateral_max),
            depth: (c.depth_min, c.depth_max),
            points_per_box: c.points_per_box,
            ground_points: c.ground_points,
            image_height: c.image_height,
            image_width: c.image_width,
            focal_length: c.focal_length,
            camera_height: c.camera_height,
            max_placement_attempts: c.max_placement_attempts,
        }
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::from(&HarnessConfig::default())
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<()> {
        if self.min_boxes > self.max_boxes {
            return Err(Error::invalid(format!(
                "box-count range [{}, {}] is empty",
                self.min_boxes, self.max_boxes
            )));
        }
        if !(self.lateral.0 < self.lateral.1 && self.depth.0 < self.depth.1 && self.depth.0 > 0.0) {
            return Err(Error::invalid("scene area bounds must be ordered, with positive depth"));
        }
        if self.points_per_box < 20 {
            return Err(Error::invalid("points_per_box must be at least 20"));
        }
        if self.image_height == 0 || self.image_width == 0 || !(self.focal_length > 0.0) {
            return Err(Error::invalid("image size and focal length must be positive"));
        }
        if !(self.camera_height > 0.0) {
            return Err(Error::invalid("camera height must be positive"));
        }
        Ok(())
    }

    /// Forward-looking camera `camera_height` above the world origin.
    pub fn camera(&self) -> Result<CameraModel> {
        let f = self.focal_length;
        let k = [
            [f, 0.0, self.image_width as f64 / 2.0],
            [0.0, f, 0.375 * self.image_height as f64],
            [0.0, 0.0, 1.0],
        ];
        let rt = RigidTransform {
            rotation: [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]],
            translation: [0.0, self.camera_height, 0.0],
        };
        CameraModel::new(k, rt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub frame_id: u32,
    pub seed: u64,
    /// Ground truth in camera coordinates, confidence 1.
    pub boxes: Vec<DetectionBox>,
    pub points: Vec<ScenePoint>,
    pub camera: CameraModel,
    /// Depth, intensity and semantic channels.
    pub image: FeatureMap,
    /// Camera-frame depth of each pixel's first hit, row-major.
    pub depth: Vec<Option<f64>>,
}

impl SyntheticScene {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn camera_point(&self, i: usize) -> [f64; 3] {
        self.camera.world_to_camera(self.points[i].position)
    }
}

/// Camera-frame axis-aligned extent `(min, max)` of a box.
fn box_extent(b: &DetectionBox) -> ([f64; 3], [f64; 3]) {
    let (x0, x1, z0, z1) = b.bev_footprint();
    let y1 = b.location[1];
    ([x0, y1 - b.height(), z0], [x1, y1, z1])
}

/// Slab test for the ray `t·dir`, `t ≥ 0`. Returns the entry parameter and
/// the axis of the entry face.
fn ray_box(dir: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, usize)> {
    let (mut t_in, mut t_out, mut axis) = (0.0f64, f64::INFINITY, 0usize);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if 0.0 < lo[a] || 0.0 > hi[a] {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = (lo[a] / dir[a], hi[a] / dir[a]);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_in {
            t_in = t0;
            axis = a;
        }
        t_out = t_out.min(t1);
    }
    (t_in <= t_out).then_some((t_in, axis))
}

fn occluded(p: [f64; 3], boxes: &[DetectionBox]) -> bool {
    boxes.iter().any(|b| {
        let (lo, hi) = box_extent(b);
        matches!(ray_box(p, lo, hi), Some((t, _)) if t < 1.0 - 1e-6)
    })
}

fn place_boxes<R: Rng>(cfg: &SceneConfig, camera: &CameraModel, rng: &mut R) -> Result<Vec<DetectionBox>> {
    let count = rng.random_range(cfg.min_boxes..=cfg.max_boxes);
    let mut boxes: Vec<DetectionBox> = Vec::with_capacity(count);
    let mut attempts = 0;
    while boxes.len() < count {
        if attempts == cfg.max_placement_attempts {
            return Err(Error::Unsatisfiable(format!(
                "placed {} of {count} boxes in lateral {:?} x depth {:?} after {attempts} attempts",
                boxes.len(),
                cfg.lateral,
                cfg.depth
            )));
        }
        attempts += 1;
        let dims = [
            rng.random_range(1.4..1.6),
            rng.random_range(1.55..1.75),
            rng.random_range(3.6..4.2),
        ];
        let x = rng.random_range(cfg.lateral.0..cfg.lateral.1);
        let z = rng.random_range(cfg.depth.0..cfg.depth.1);
        let candidate = DetectionBox::new(ObjectClass::Car, [x, cfg.camera_height, z], dims, 0.0, 1.0)?;
        let (col, row) = camera.pixel_of_camera_point([x, cfg.camera_height - dims[0] / 2.0, z]);
        let (col, row) = (col.round(), row.round());
        if !(col >= 0.0 && col < cfg.image_width as f64 && row >= 0.0 && row < cfg.image_height as f64) {
            continue;
        }
        let (cx0, cx1, cz0, cz1) = candidate.bev_footprint();
        let clear = boxes.iter().all(|b| {
            let (x0, x1, z0, z1) = b.bev_footprint();
            bev_iou(b, &candidate) == 0.0
                && (cx0 > x1 + BOX_GAP || cx1 < x0 - BOX_GAP || cz0 > z1 + BOX_GAP || cz1 < z0 - BOX_GAP)
        });
        if clear {
            boxes.push(candidate);
        }
    }
    Ok(boxes)
}

fn sample_box_surface<R: Rng>(b: &DetectionBox, index: usize, n: usize, rng: &mut R) -> Vec<([f64; 3], ScenePoint)> {
    let (lo, hi) = box_extent(b);
    let [h, w, l] = b.dimensions;
    let faces = [
        (Surface::Top, l * w),
        (Surface::Front, l * h),
        (Surface::Back, l * h),
        (Surface::Side, w * h),
        (Surface::Side, w * h),
    ];
    let total: f64 = faces.iter().map(|f| f.1).sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut face = 0;
            while face < faces.len() - 1 && pick >= faces[face].1 {
                pick -= faces[face].1;
                face += 1;
            }
            let u = [
                rng.random_range(lo[0]..=hi[0]),
                rng.random_range(lo[1]..=hi[1]),
                rng.random_range(lo[2]..=hi[2]),
            ];
            let p = match face {
                0 => [u[0], lo[1], u[2]],
                1 => [u[0], u[1], lo[2]],
                2 => [u[0], u[1], hi[2]],
                3 => [lo[0], u[1], u[2]],
                _ => [hi[0], u[1], u[2]],
            };
            let height = b.location[1] - p[1];
            let point = ScenePoint {
                position: [0.0; 3],
                height,
                normal_z: if face == 0 { 1.0 } else { 0.0 },
                box_index: Some(index),
                surface: faces[face].0,
                visible: false,
            };
            (p, point)
        })
        .collect()
}

struct Hit {
    depth: f64,
    height: f64,
    normal_z: f64,
    on_box: bool,
}

fn cast_pixel(col: usize, row: usize, camera: &CameraModel, boxes: &[DetectionBox], cfg: &SceneConfig) -> Option<Hit> {
    let dir = [
        (col as f64 - camera.cx()) / camera.fx(),
        (row as f64 - camera.cy()) / camera.fy(),
        1.0,
    ];
    let far = cfg.depth.1 + 20.0;
    let mut best: Option<Hit> = None;
    for b in boxes {
        let (lo, hi) = box_extent(b);
        if let Some((t, axis)) = ray_box(dir, lo, hi) {
            if t > MIN_DEPTH && t < far && best.as_ref().is_none_or(|h| t < h.depth) {
                best = Some(Hit {
                    depth: t,
                    height: b.location[1] - t * dir[1],
                    normal_z: if axis == 1 { 1.0 } else { 0.0 },
                    on_box: true,
                });
            }
        }
    }
    if dir[1] > 0.0 {
        let t = cfg.camera_height / dir[1];
        if t < far && best.as_ref().is_none_or(|h| t < h.depth) {
            best = Some(Hit {
                depth: t,
                height: 0.0,
                normal_z: 1.0,
                on_box: false,
            });
        }
    }
    best
}

/// Sensor-like brightness: bright horizontal surfaces, brighter with height.
pub fn intensity(height: f64, normal_z: f64) -> f64 {
    0.2 + 0.4 * normal_z + 0.4 * (height / 2.0).clamp(0.0, 1.0)
}

fn render_image(camera: &CameraModel, boxes: &[DetectionBox], cfg: &SceneConfig) -> (FeatureMap, Vec<Option<f64>>) {
    let (h, w) = (cfg.image_height, cfg.image_width);
    let mut image = FeatureMap::zeros(IMAGE_CHANNELS, h, w);
    let mut depth = vec![None; h * w];
    for row in 0..h {
        for col in 0..w {
            if let Some(hit) = cast_pixel(col, row, camera, boxes, cfg) {
                image.set(0, row, col, hit.depth / DEPTH_SCALE);
                image.set(1, row, col, intensity(hit.height, hit.normal_z));
                image.set(2, row, col, if hit.on_box { 1.0 } else { 0.0 });
                depth[row * w + col] = Some(hit.depth);
            }
        }
    }
    (image, depth)
}

/// Deterministic scene for `seed`. Boxes are axis-aligned cars whose
/// centres project into the image and whose footprints are pairwise
/// disjoint.
pub fn generate_scene(seed: u64, frame_id: u32, cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = seeded_rng(seed);
    let camera = cfg.camera()?;
    let boxes = place_boxes(cfg, &camera, &mut rng)?;

    let mut sampled: Vec<([f64; 3], ScenePoint)> = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        sampled.extend(sample_box_surface(b, i, cfg.points_per_box, &mut rng));
    }
    let (gx0, gx1) = (cfg.lateral.0 - 2.0, cfg.lateral.1 + 2.0);
    let (gz0, gz1) = ((cfg.depth.0 - 3.0).max(1.0), cfg.depth.1 + 3.0);
    for _ in 0..cfg.ground_points {
        let p = [rng.random_range(gx0..gx1), cfg.camera_height, rng.random_range(gz0..gz1)];
        if boxes.iter().any(|b| b.contains_camera_point(p, 0.0)) {
            continue;
        }
        sampled.push((
            p,
            ScenePoint {
                position: [0.0; 3],
                height: 0.0,
                normal_z: 1.0,
                box_index: None,
                surface: Surface::Ground,
                visible: false,
            },
        ));
    }

    let points = sampled
        .into_iter()
        .map(|(p, mut point)| {
            let (col, row) = camera.pixel_of_camera_point(p);
            let (col, row) = (col.round(), row.round());
            let in_image = p[2] > MIN_DEPTH
                && col >= 0.0
                && col < cfg.image_width as f64
                && row >= 0.0
                && row < cfg.image_height as f64;
            point.visible = in_image && !occluded(p, &boxes);
            point.position = camera.camera_to_world(p);
            point
        })
        .collect();

    let (image, depth) = render_image(&camera, &boxes, cfg);
    Ok(SyntheticScene {
        frame_id,
        seed,
        boxes,
        points,
        camera,
        image,
        depth,
    })
}
