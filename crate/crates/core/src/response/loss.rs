//! Anchor assignment and the toy detection loss used as the response-level
//! objective: smooth-L1 on matched box residuals plus binary cross-entropy
//! on objectness.

use serde::{Deserialize, Serialize};

use super::labels::{DetectionBox, ObjectClass, SoftLabelSet};
use crate::error::{Error, Result};
use crate::metrics::bev_iou;
use crate::numerics::Tensor;

/// Residual channels per anchor: `(x, y, z, h, w, l, yaw)`.
pub const BOX_PARAMS: usize = 7;

/// Floor applied inside the cross-entropy logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub location: [f64; 3],
    pub dimensions: [f64; 3],
    pub yaw: f64,
}

impl Anchor {
    pub fn params(&self) -> [f64; BOX_PARAMS] {
        let [x, y, z] = self.location;
        let [h, w, l] = self.dimensions;
        [x, y, z, h, w, l, self.yaw]
    }

    pub fn as_box(&self) -> DetectionBox {
        DetectionBox::new(ObjectClass::Car, self.location, self.dimensions, self.yaw, 1.0)
            .expect("anchor dimensions are positive")
    }

    /// Box decoded from additive residuals, with dimensions floored to stay
    /// positive.
    pub fn decode(&self, residual: &[f64], class: ObjectClass, confidence: f64) -> DetectionBox {
        let p = self.params();
        let v: Vec<f64> = p.iter().zip(residual).map(|(a, r)| a + r).collect();
        let dim = |x: f64| x.max(1e-3);
        DetectionBox::new(
            class,
            [v[0], v[1], v[2]],
            [dim(v[3]), dim(v[4]), dim(v[5])],
            v[6],
            confidence.clamp(0.0, 1.0),
        )
        .expect("decoded box is valid")
    }
}

pub fn box_params(b: &DetectionBox) -> [f64; BOX_PARAMS] {
    let [x, y, z] = b.location;
    let [h, w, l] = b.dimensions;
    [x, y, z, h, w, l, b.yaw]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchingConfig {
    /// Anchors at or above this BEV IoU with a label are positives.
    pub positive_iou: f64,
    /// Anchors below this IoU with every label are negatives.
    pub negative_iou: f64,
    /// Also mark each label's best-overlapping anchor positive.
    pub best_anchor_positive: bool,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            positive_iou: 0.5,
            negative_iou: 0.3,
            best_anchor_positive: true,
        }
    }
}

/// Role of one anchor in the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Assignment {
    Positive(usize),
    Negative,
    Ignored,
}

/// Matches anchors to labels by BEV IoU.
pub fn assign_anchors(anchors: &[Anchor], labels: &[DetectionBox], cfg: &MatchingConfig) -> Result<Vec<Assignment>> {
    if anchors.is_empty() {
        return Err(Error::invalid("response loss needs at least one anchor"));
    }
    let anchor_boxes: Vec<DetectionBox> = anchors.iter().map(Anchor::as_box).collect();
    let mut best_per_label = vec![(0.0f64, usize::MAX); labels.len()];
    let mut out = Vec::with_capacity(anchors.len());
    for (a, ab) in anchor_boxes.iter().enumerate() {
        let mut best = (0.0f64, usize::MAX);
        for (l, lb) in labels.iter().enumerate() {
            let iou = bev_iou(ab, lb);
            if iou > best.0 {
                best = (iou, l);
            }
            if iou > best_per_label[l].0 {
                best_per_label[l] = (iou, a);
            }
        }
        out.push(if best.1 != usize::MAX && best.0 >= cfg.positive_iou {
            Assignment::Positive(best.1)
        } else if best.0 < cfg.negative_iou {
            Assignment::Negative
        } else {
            Assignment::Ignored
        });
    }
    if cfg.best_anchor_positive {
        for (l, &(iou, a)) in best_per_label.iter().enumerate() {
            if a != usize::MAX && iou > 0.0 && !matches!(out[a], Assignment::Positive(_)) {
                out[a] = Assignment::Positive(l);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Target {
    Positive([f64; BOX_PARAMS]),
    Negative,
    Ignored,
}

/// Per-anchor regression targets and objectness labels, fixed for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    targets: Vec<Target>,
}

/// The two parts of the response loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResponseTerms {
    pub regression: f64,
    pub objectness: f64,
}

impl ResponseTerms {
    pub fn total(&self) -> f64 {
        self.regression + self.objectness
    }
}

#[inline]
fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

#[inline]
fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

#[inline]
fn clamped_neg_log(p: f64) -> f64 {
    -p.max(LOG_CLAMP).ln()
}

#[inline]
fn clamped_neg_log_grad(p: f64) -> f64 {
    if p > LOG_CLAMP {
        -1.0 / p
    } else {
        0.0
    }
}

impl AnchorTargets {
    pub fn new(anchors: &[Anchor], labels: &[DetectionBox], assignment: &[Assignment]) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::invalid("response loss needs at least one anchor"));
        }
        if assignment.len() != anchors.len() {
            return Err(Error::shape("anchor assignment", anchors.len(), assignment.len()));
        }
        let targets = anchors
            .iter()
            .zip(assignment)
            .map(|(a, s)| match *s {
                Assignment::Positive(l) => {
                    let label = labels.get(l).ok_or_else(|| {
                        Error::invalid(format!("assignment refers to missing label {l}"))
                    })?;
                    let lp = box_params(label);
                    let ap = a.params();
                    let mut t = [0.0; BOX_PARAMS];
                    for k in 0..BOX_PARAMS {
                        t[k] = lp[k] - ap[k];
                    }
                    Ok(Target::Positive(t))
                }
                Assignment::Negative => Ok(Target::Negative),
                Assignment::Ignored => Ok(Target::Ignored),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { targets })
    }

    /// Assigns by IoU and builds the targets in one go.
    pub fn from_labels(anchors: &[Anchor], labels: &[DetectionBox], cfg: &MatchingConfig) -> Result<Self> {
        let assignment = assign_anchors(anchors, labels, cfg)?;
        Self::new(anchors, labels, &assignment)
    }

    pub fn anchor_count(&self) -> usize {
        self.targets.len()
    }

    pub fn positives(&self) -> usize {
        self.targets.iter().filter(|t| matches!(t, Target::Positive(_))).count()
    }

    pub fn negatives(&self) -> usize {
        self.targets.iter().filter(|t| matches!(t, Target::Negative)).count()
    }

    fn check(&self, residuals: &Tensor, objectness: &Tensor) -> Result<()> {
        let a = self.targets.len();
        // any layout `[7, ...]` holding one residual vector per anchor
        if residuals.shape().first() != Some(&BOX_PARAMS) || residuals.len() != BOX_PARAMS * a {
            return Err(Error::shape("response residuals", [BOX_PARAMS, a], residuals.shape()));
        }
        if objectness.len() != a {
            return Err(Error::shape("response objectness", a, objectness.len()));
        }
        Ok(())
    }

    /// Regression is summed over positive anchors and parameters, and
    /// cross-entropy over positive and negative anchors; both sums are
    /// divided by the positive count, floored at one. `residuals` is `[7, A]` or `[7, H, W]` with
    /// `A = H·W`; `objectness` holds probabilities.
    pub fn terms(&self, residuals: &Tensor, objectness: &Tensor) -> Result<ResponseTerms> {
        self.check(residuals, objectness)?;
        let a = self.targets.len();
        let r = residuals.data();
        let p = objectness.data();
        let (mut reg, mut bce) = (0.0, 0.0);
        let mut n_pos = 0usize;
        for (i, t) in self.targets.iter().enumerate() {
            match t {
                Target::Positive(target) => {
                    n_pos += 1;
                    for k in 0..BOX_PARAMS {
                        reg += smooth_l1(r[k * a + i] - target[k]);
                    }
                    bce += clamped_neg_log(p[i]);
                }
                Target::Negative => {
                    bce += clamped_neg_log(1.0 - p[i]);
                }
                Target::Ignored => {}
            }
        }
        let norm = n_pos.max(1) as f64;
        Ok(ResponseTerms {
            regression: reg / norm,
            objectness: bce / norm,
        })
    }

    pub fn loss(&self, residuals: &Tensor, objectness: &Tensor) -> Result<f64> {
        Ok(self.terms(residuals, objectness)?.total())
    }

    /// `(d_residuals, d_objectness)` scaled by `upstream`.
    pub fn gradient(&self, residuals: &Tensor, objectness: &Tensor, upstream: f64) -> (Vec<f64>, Vec<f64>) {
        let a = self.targets.len();
        let r = residuals.data();
        let p = objectness.data();
        let scale = upstream / self.positives().max(1) as f64;
        let mut d_r = vec![0.0; r.len()];
        let mut d_p = vec![0.0; p.len()];
        for (i, t) in self.targets.iter().enumerate() {
            match t {
                Target::Positive(target) => {
                    for k in 0..BOX_PARAMS {
                        d_r[k * a + i] = scale * smooth_l1_grad(r[k * a + i] - target[k]);
                    }
                    d_p[i] = scale * clamped_neg_log_grad(p[i]);
                }
                Target::Negative => {
                    d_p[i] = -scale * clamped_neg_log_grad(1.0 - p[i]);
                }
                Target::Ignored => {}
            }
        }
        (d_r, d_p)
    }
}

/// Response loss of per-anchor predictions against soft labels.
pub fn response_loss(
    residuals: &Tensor,
    objectness: &Tensor,
    labels: &SoftLabelSet,
    anchors: &[Anchor],
    assignment: &[Assignment],
) -> Result<f64> {
    AnchorTargets::new(anchors, &labels.boxes, assignment)?.loss(residuals, objectness)
}
