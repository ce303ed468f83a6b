use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::Cyclist => "Cyclist",
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Car" => Ok(ObjectClass::Car),
            "Pedestrian" => Ok(ObjectClass::Pedestrian),
            "Cyclist" => Ok(ObjectClass::Cyclist),
            other => Err(Error::invalid(format!("unknown object class `{other}`"))),
        }
    }
}

/// A 3D box in KITTI camera convention: `location` is the bottom centre in
/// camera coordinates (x right, y down, z forward), `dimensions` are
/// `(h, w, l)`, `yaw` is rotation about the camera y axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub class: ObjectClass,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    /// `(left, top, right, bottom)` in pixels.
    pub bbox: Option<[f64; 4]>,
    pub dimensions: [f64; 3],
    pub location: [f64; 3],
    pub yaw: f64,
    pub confidence: f64,
}

impl DetectionBox {
    pub fn new(
        class: ObjectClass,
        location: [f64; 3],
        dimensions: [f64; 3],
        yaw: f64,
        confidence: f64,
    ) -> Result<Self> {
        let b = Self {
            class,
            truncation: 0.0,
            occlusion: 0,
            alpha: 0.0,
            bbox: None,
            dimensions,
            location,
            yaw,
            confidence,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dimensions.iter().all(|&d| d > 0.0 && d.is_finite()) {
            return Err(Error::invalid(format!(
                "box dimensions must be positive, got {:?}",
                self.dimensions
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::invalid(format!(
                "confidence must lie in [0, 1], got {}",
                self.confidence
            )));
        }
        if !self.location.iter().all(|v| v.is_finite()) || !self.yaw.is_finite() {
            return Err(Error::invalid("box location and yaw must be finite"));
        }
        Ok(())
    }

    pub fn height(&self) -> f64 {
        self.dimensions[0]
    }

    pub fn width(&self) -> f64 {
        self.dimensions[1]
    }

    pub fn length(&self) -> f64 {
        self.dimensions[2]
    }

    /// Axis-aligned bird's-eye footprint `(x_min, x_max, z_min, z_max)`:
    /// length along camera x, width along camera z (yaw ignored).
    pub fn bev_footprint(&self) -> (f64, f64, f64, f64) {
        let [x, _, z] = self.location;
        let half_l = self.length() / 2.0;
        let half_w = self.width() / 2.0;
        (x - half_l, x + half_l, z - half_w, z + half_w)
    }

    /// Whether a camera-frame point lies inside the axis-aligned box,
    /// expanded by `margin` on every side.
    pub fn contains_camera_point(&self, p: [f64; 3], margin: f64) -> bool {
        let (x0, x1, z0, z1) = self.bev_footprint();
        let y_bottom = self.location[1];
        let y_top = y_bottom - self.height();
        p[0] >= x0 - margin
            && p[0] <= x1 + margin
            && p[2] >= z0 - margin
            && p[2] <= z1 + margin
            && p[1] >= y_top - margin
            && p[1] <= y_bottom + margin
    }
}

/// Boxes of one frame, all in that frame's camera coordinates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SoftLabelSet {
    pub frame_id: u32,
    pub boxes: Vec<DetectionBox>,
}

impl SoftLabelSet {
    pub fn new(frame_id: u32, boxes: Vec<DetectionBox>) -> Self {
        Self { frame_id, boxes }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// KITTI label filename for this frame.
    pub fn file_name(&self) -> String {
        format!("{:06}.txt", self.frame_id)
    }

    pub fn of_class(&self, class: ObjectClass) -> impl Iterator<Item = &DetectionBox> {
        self.boxes.iter().filter(move |b| b.class == class)
    }
}

/// Per-class minimum confidence for a prediction to become a soft label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    thresholds: BTreeMap<ObjectClass, f64>,
}

impl Default for ThresholdPolicy {
    /// Car 0.7; Pedestrian and Cyclist 0.
    fn default() -> Self {
        Self::new(0.7, 0.0, 0.0).expect("valid defaults")
    }
}

impl ThresholdPolicy {
    pub fn new(car: f64, pedestrian: f64, cyclist: f64) -> Result<Self> {
        Self::from_map(BTreeMap::from([
            (ObjectClass::Car, car),
            (ObjectClass::Pedestrian, pedestrian),
            (ObjectClass::Cyclist, cyclist),
        ]))
    }

    pub fn uniform(threshold: f64) -> Result<Self> {
        Self::new(threshold, threshold, threshold)
    }

    /// A policy covering only the given classes; boxes of other classes are
    /// rejected by [`filter_soft_labels`].
    pub fn from_map(thresholds: BTreeMap<ObjectClass, f64>) -> Result<Self> {
        if let Some((class, t)) = thresholds.iter().find(|(_, t)| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid(format!("threshold for {class} must lie in [0, 1], got {t}")));
        }
        Ok(Self { thresholds })
    }

    pub fn threshold(&self, class: ObjectClass) -> Option<f64> {
        self.thresholds.get(&class).copied()
    }
}

/// Keeps boxes whose confidence reaches their class threshold, in order.
pub fn filter_soft_labels(predictions: &SoftLabelSet, policy: &ThresholdPolicy) -> Result<SoftLabelSet> {
    let mut kept = Vec::with_capacity(predictions.len());
    for b in &predictions.boxes {
        let t = policy
            .threshold(b.class)
            .ok_or_else(|| Error::invalid(format!("no threshold configured for class {}", b.class)))?;
        if b.confidence >= t {
            kept.push(b.clone());
        }
    }
    Ok(SoftLabelSet::new(predictions.frame_id, kept))
}

/// Per-class counts of confidences over `bins` uniform bins on `[0, 1]`;
/// the last bin is closed on the right.
pub fn confidence_histogram(
    predictions: &[SoftLabelSet],
    bins: usize,
) -> Result<BTreeMap<ObjectClass, Vec<usize>>> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let mut counts: BTreeMap<ObjectClass, Vec<usize>> =
        ObjectClass::ALL.iter().map(|&c| (c, vec![0; bins])).collect();
    for b in predictions.iter().flat_map(|s| &s.boxes) {
        let bin = ((b.confidence * bins as f64).floor() as usize).min(bins - 1);
        counts.get_mut(&b.class).expect("all classes present")[bin] += 1;
    }
    Ok(counts)
}
