//! Soft labels: confidence filtering of teacher predictions, KITTI label
//! I/O, and the detection loss that supervises the student with them.

mod kitti;
mod labels;
mod loss;

pub use kitti::{
    emit_kitti_labels, frame_id_from_path, list_label_files, parse_kitti_labels, read_label_file,
    write_label_file,
};
pub use labels::{
    confidence_histogram, filter_soft_labels, DetectionBox, ObjectClass, SoftLabelSet, ThresholdPolicy,
};
pub use loss::{
    assign_anchors, box_params, response_loss, Anchor, AnchorTargets, Assignment, MatchingConfig,
    ResponseTerms, BOX_PARAMS, LOG_CLAMP,
};
