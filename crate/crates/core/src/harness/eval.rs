//! Detection evaluation over synthetic scenes.

use super::scene::SyntheticScene;
use super::student::Detector;
use crate::error::Result;
use crate::metrics::{average_precision, ApRecord, RecallSet};
use crate::response::{DetectionBox, ObjectClass, SoftLabelSet};

/// Per-class AP of `detector` on `scenes` against their ground truth.
/// Classes without ground truth get the undefined sentinel.
pub fn evaluate(
    detector: &dyn Detector,
    scenes: &[SyntheticScene],
    iou_threshold: f64,
    recall_set: RecallSet,
) -> Result<Vec<ApRecord>> {
    let predictions = scenes.iter().map(|s| detector.detect(s)).collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&predictions, scenes, iou_threshold, recall_set)
}

pub fn evaluate_predictions(
    predictions: &[SoftLabelSet],
    scenes: &[SyntheticScene],
    iou_threshold: f64,
    recall_set: RecallSet,
) -> Result<Vec<ApRecord>> {
    let by_class = |class: ObjectClass, boxes: &[DetectionBox]| -> Vec<DetectionBox> {
        boxes.iter().filter(|b| b.class == class).cloned().collect()
    };
    ObjectClass::ALL
        .iter()
        .map(|&class| {
            let dets: Vec<Vec<DetectionBox>> = predictions.iter().map(|p| by_class(class, &p.boxes)).collect();
            let gt: Vec<Vec<DetectionBox>> = scenes.iter().map(|s| by_class(class, &s.boxes)).collect();
            Ok(ApRecord {
                class,
                iou_threshold,
                recall_set,
                ap: average_precision(&dets, &gt, iou_threshold, recall_set)?,
            })
        })
        .collect()
}

/// AP of one class from a report, NaN when absent or undefined.
pub fn class_ap(records: &[ApRecord], class: ObjectClass) -> f64 {
    records
        .iter()
        .find(|r| r.class == class)
        .map_or(f64::NAN, |r| r.ap.value())
}
