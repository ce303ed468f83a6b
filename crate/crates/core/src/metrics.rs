//! Loss composition, global/local fusion, bird's-eye IoU and interpolated
//! average precision.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::sigmoid;
use crate::numerics::{Tape, Var};
use crate::response::{DetectionBox, ObjectClass};

/// Fixed weights of the two imitation terms in the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub scene: f64,
    pub roi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { scene: 1.0, roi: 1.0 }
    }
}

impl LossWeights {
    pub fn new(scene: f64, roi: f64) -> Result<Self> {
        if !(scene.is_finite() && roi.is_finite() && scene >= 0.0 && roi >= 0.0) {
            return Err(Error::invalid(format!(
                "loss weights must be finite and non-negative, got scene={scene} roi={roi}"
            )));
        }
        Ok(Self { scene, roi })
    }
}

/// `L = L_response + λ_scene·L_scene + λ_roi·L_roi`.
pub fn total_loss(response: f64, scene: f64, roi: f64, weights: LossWeights) -> f64 {
    response + weights.scene * scene + weights.roi * roi
}

pub fn total_loss_on_tape(tape: &mut Tape, response: Var, scene: Var, roi: Var, weights: LossWeights) -> Result<Var> {
    tape.weighted_sum(&[(response, 1.0), (scene, weights.scene), (roi, weights.roi)])
}

/// Raw (pre-sigmoid) learnable weights fusing global and local branch
/// losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub raw_alpha: f64,
    pub raw_beta: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            raw_alpha: 0.0,
            raw_beta: 0.0,
        }
    }
}

impl FusionWeights {
    pub fn alpha(&self) -> f64 {
        sigmoid(self.raw_alpha)
    }

    pub fn beta(&self) -> f64 {
        sigmoid(self.raw_beta)
    }
}

/// `w·global + (1 − w)·local` with `w = sigmoid(raw_weight)`.
pub fn fuse_global_local(global: f64, local: f64, raw_weight: f64) -> f64 {
    let w = sigmoid(raw_weight);
    w * global + (1.0 - w) * local
}

pub fn fuse_global_local_on_tape(tape: &mut Tape, global: Var, local: Var, raw_weight: Var) -> Result<Var> {
    tape.fuse(global, local, raw_weight)
}

/// IoU of the axis-aligned bird's-eye footprints (yaw ignored).
pub fn bev_iou(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let (ax0, ax1, az0, az1) = a.bev_footprint();
    let (bx0, bx1, bz0, bz1) = b.bev_footprint();
    let ix = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let iz = (az1.min(bz1) - az0.max(bz0)).max(0.0);
    let inter = ix * iz;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = (ax1 - ax0) * (az1 - az0) + (bx1 - bx0) * (bz1 - bz0) - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecallSet {
    /// `{0, 0.1, …, 1}`
    R11,
    /// `{1/40, 2/40, …, 1}`
    R40,
}

impl RecallSet {
    pub fn points(self) -> Vec<f64> {
        match self {
            RecallSet::R11 => (0..=10).map(|i| i as f64 / 10.0).collect(),
            RecallSet::R40 => (1..=40).map(|i| i as f64 / 40.0).collect(),
        }
    }
}

impl fmt::Display for RecallSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecallSet::R11 => "R11",
            RecallSet::R40 => "R40",
        })
    }
}

impl FromStr for RecallSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "R11" | "11" => Ok(RecallSet::R11),
            "R40" | "40" => Ok(RecallSet::R40),
            _ => Err(Error::invalid(format!("unknown recall set `{s}` (expected R11 or R40)"))),
        }
    }
}

/// AP value, or the reason it is undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ApOutcome {
    Value(f64),
    Undefined(&'static str),
}

impl ApOutcome {
    /// The AP, with NaN standing in for an undefined result.
    pub fn value(self) -> f64 {
        match self {
            ApOutcome::Value(v) => v,
            ApOutcome::Undefined(_) => f64::NAN,
        }
    }
}

/// One point of the precision/recall curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Greedy confidence-ordered matching: every detection, highest
/// confidence first, claims the unmatched ground truth in its frame with
/// the highest IoU, provided it reaches `iou_threshold`.
pub fn precision_recall_curve(
    detections: &[Vec<DetectionBox>],
    ground_truth: &[Vec<DetectionBox>],
    iou_threshold: f64,
) -> Result<(Vec<PrPoint>, usize)> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::invalid(format!("IoU threshold must lie in (0, 1], got {iou_threshold}")));
    }
    if detections.len() != ground_truth.len() {
        return Err(Error::shape("average_precision frames", ground_truth.len(), detections.len()));
    }
    let total_gt: usize = ground_truth.iter().map(Vec::len).sum();

    let mut order: Vec<(usize, usize)> = detections
        .iter()
        .enumerate()
        .flat_map(|(f, dets)| (0..dets.len()).map(move |i| (f, i)))
        .collect();
    // stable: equal confidences keep (frame, index) order
    order.sort_by(|a, b| {
        let ca = detections[a.0][a.1].confidence;
        let cb = detections[b.0][b.1].confidence;
        cb.total_cmp(&ca)
    });

    let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(order.len());
    for (f, i) in order {
        let det = &detections[f][i];
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in ground_truth[f].iter().enumerate() {
            if matched[f][g] {
                continue;
            }
            let iou = bev_iou(det, gt);
            if iou >= iou_threshold && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, g));
            }
        }
        match best {
            Some((_, g)) => {
                matched[f][g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push(PrPoint {
            recall: if total_gt > 0 { tp as f64 / total_gt as f64 } else { 0.0 },
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    Ok((curve, total_gt))
}

/// Mean over the recall set of the interpolated precision
/// `ρ(r) = max { precision at recall ≥ r }` (0 when no point reaches `r`).
pub fn interpolated_ap(curve: &[PrPoint], recall_set: RecallSet) -> f64 {
    let points = recall_set.points();
    // suffix maximum of precision over the curve sorted by recall
    let mut sorted = curve.to_vec();
    sorted.sort_by(|a, b| a.recall.total_cmp(&b.recall));
    let mut suffix = vec![0.0f64; sorted.len() + 1];
    for i in (0..sorted.len()).rev() {
        suffix[i] = suffix[i + 1].max(sorted[i].precision);
    }
    let total: f64 = points
        .iter()
        .map(|&r| {
            let first = sorted.partition_point(|p| p.recall < r - 1e-12);
            suffix[first]
        })
        .sum();
    total / points.len() as f64
}

pub fn average_precision(
    detections: &[Vec<DetectionBox>],
    ground_truth: &[Vec<DetectionBox>],
    iou_threshold: f64,
    recall_set: RecallSet,
) -> Result<ApOutcome> {
    let (curve, total_gt) = precision_recall_curve(detections, ground_truth, iou_threshold)?;
    if total_gt == 0 {
        return Ok(ApOutcome::Undefined("no ground-truth boxes"));
    }
    Ok(ApOutcome::Value(interpolated_ap(&curve, recall_set)))
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct ApRecord {
    pub class: ObjectClass,
    pub iou_threshold: f64,
    pub recall_set: RecallSet,
    pub ap: ApOutcome,
}

/// CSV with header `class,iou_threshold,recall_set,ap`; undefined AP is
/// written as `NaN`.
pub fn ap_report_csv(records: &[ApRecord]) -> String {
    let mut out = String::from("class,iou_threshold,recall_set,ap\n");
    for r in records {
        let ap = match r.ap {
            ApOutcome::Value(v) => format!("{v:.6}"),
            ApOutcome::Undefined(_) => "NaN".to_string(),
        };
        out.push_str(&format!("{},{},{},{}\n", r.class, r.iou_threshold, r.recall_set, ap));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: f64, z: f64, conf: f64) -> DetectionBox {
        // 2x2 footprint
        DetectionBox::new(ObjectClass::Car, [x, 1.0, z], [1.5, 2.0, 2.0], 0.0, conf).unwrap()
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(2.0, 0.5, 0.25, w), 2.75);
        assert_eq!(total_loss(0.0, 0.0, 0.0, w), 0.0);
        assert_eq!(total_loss(1.3, 7.0, 9.0, LossWeights::new(0.0, 0.0).unwrap()), 1.3);
        assert!(LossWeights::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn fusion_examples() {
        assert_eq!(fuse_global_local(2.0, 4.0, 0.0), 3.0);
        for raw in [-3.0, 0.0, 0.7, 12.0] {
            assert!((fuse_global_local(1.25, 1.25, raw) - 1.25).abs() < 1e-15);
        }
        let v = fuse_global_local(4.0, 8.0, 3f64.ln());
        assert!((v - (0.75 * 4.0 + 0.25 * 8.0)).abs() < 1e-14);
        assert_eq!(FusionWeights::default().alpha(), 0.5);
    }

    #[test]
    fn iou_examples() {
        let a = square(0.0, 10.0, 1.0);
        assert_eq!(bev_iou(&a, &a), 1.0);
        assert_eq!(bev_iou(&a, &square(10.0, 10.0, 1.0)), 0.0);
        let shifted = square(1.0, 10.0, 1.0);
        assert!((bev_iou(&a, &shifted) - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_detector_scores_one() {
        let gt = vec![vec![square(0.0, 10.0, 1.0), square(5.0, 10.0, 1.0)], vec![square(0.0, 20.0, 1.0)]];
        for set in [RecallSet::R11, RecallSet::R40] {
            assert_eq!(average_precision(&gt, &gt, 0.7, set).unwrap(), ApOutcome::Value(1.0));
        }
    }

    #[test]
    fn higher_false_positive_halves_precision() {
        let gt = vec![vec![square(0.0, 10.0, 1.0)]];
        let dets = vec![vec![square(0.0, 10.0, 0.9), square(8.0, 10.0, 0.95)]];
        for set in [RecallSet::R11, RecallSet::R40] {
            let ap = average_precision(&dets, &gt, 0.5, set).unwrap().value();
            assert!((ap - 0.5).abs() < 1e-12, "{set}: {ap}");
        }
    }

    #[test]
    fn no_detections_and_no_ground_truth() {
        let gt = vec![vec![square(0.0, 10.0, 1.0)]];
        assert_eq!(average_precision(&[vec![]], &gt, 0.5, RecallSet::R40).unwrap(), ApOutcome::Value(0.0));
        let undefined = average_precision(&[vec![square(0.0, 1.0, 0.5)]], &[vec![]], 0.5, RecallSet::R11).unwrap();
        assert!(matches!(undefined, ApOutcome::Undefined(_)));
        assert!(undefined.value().is_nan());
        assert!(average_precision(&gt, &gt, 0.0, RecallSet::R11).is_err());
    }

    #[test]
    fn each_ground_truth_matches_once() {
        let gt = vec![vec![square(0.0, 10.0, 1.0)]];
        let dets = vec![vec![square(0.0, 10.0, 0.9), square(0.0, 10.0, 0.8)]];
        let (curve, _) = precision_recall_curve(&dets, &gt, 0.5).unwrap();
        assert_eq!(curve[1], PrPoint { recall: 1.0, precision: 0.5 });
        // R11 includes recall 0, so a late duplicate does not lower AP
        let ap = average_precision(&dets, &gt, 0.5, RecallSet::R11).unwrap().value();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn report_csv_layout() {
        let csv = ap_report_csv(&[
            ApRecord {
                class: ObjectClass::Car,
                iou_threshold: 0.5,
                recall_set: RecallSet::R40,
                ap: ApOutcome::Value(0.25),
            },
            ApRecord {
                class: ObjectClass::Cyclist,
                iou_threshold: 0.7,
                recall_set: RecallSet::R11,
                ap: ApOutcome::Undefined("no ground-truth boxes"),
            },
        ]);
        assert_eq!(csv, "class,iou_threshold,recall_set,ap\nCar,0.5,R40,0.250000\nCyclist,0.7,R11,NaN\n");
    }

    #[test]
    fn recall_set_parsing() {
        assert_eq!("r40".parse::<RecallSet>().unwrap(), RecallSet::R40);
        assert_eq!(RecallSet::R11.points().len(), 11);
        assert_eq!(RecallSet::R40.points()[0], 0.025);
        assert!("R12".parse::<RecallSet>().is_err());
    }
}
