use std::path::PathBuf;

use monosim::response::{
    emit_kitti_labels, parse_kitti_labels, read_label_file, write_label_file, ObjectClass, SoftLabelSet,
};
use monosim::Error;

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_labels.txt")
}

fn golden() -> String {
    std::fs::read_to_string(golden_path()).unwrap()
}

#[test]
fn golden_file_round_trips_byte_for_byte() {
    let text = golden();
    let labels = parse_kitti_labels(&text, 7).unwrap();
    assert_eq!(labels.len(), 10);
    assert_eq!(emit_kitti_labels(&labels), text);
    // and again through the parsed values
    let again = parse_kitti_labels(&emit_kitti_labels(&labels), 7).unwrap();
    assert_eq!(again, labels);
}

#[test]
fn golden_fields_land_where_expected() {
    let labels = parse_kitti_labels(&golden(), 0).unwrap();
    let first = &labels.boxes[0];
    assert_eq!(first.class, ObjectClass::Car);
    assert_eq!(first.occlusion, 0);
    assert_eq!(first.alpha, -1.58);
    assert_eq!(first.bbox, Some([587.01, 173.33, 614.12, 200.12]));
    assert_eq!(first.dimensions, [1.65, 1.67, 3.64]);
    assert_eq!(first.location, [-0.65, 1.71, 46.7]);
    assert_eq!(first.yaw, -1.59);
    assert_eq!(first.confidence, 0.91);
    // all -1 image boxes read as absent and are written back as -1
    assert_eq!(labels.boxes[3].bbox, None);
    assert_eq!(labels.boxes[3].class, ObjectClass::Cyclist);
    assert_eq!(labels.boxes[3].occlusion, 2);
    let counts = ObjectClass::ALL.map(|c| labels.of_class(c).count());
    assert_eq!(counts, [6, 2, 2]);
}

#[test]
fn ground_truth_lines_without_score_read_as_certain() {
    let line = "Pedestrian 0.00 0 -0.20 712.40 143.00 810.73 307.92 1.89 0.48 1.20 1.84 1.47 8.41 0.01\n";
    let labels = parse_kitti_labels(line, 0).unwrap();
    assert_eq!(labels.boxes[0].confidence, 1.0);
    // emitted form always carries the score
    assert!(emit_kitti_labels(&labels).trim_end().ends_with(" 1.000000"));
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempdir();
    let labels = parse_kitti_labels(&golden(), 42).unwrap();
    let path = write_label_file(&dir, &labels).unwrap();
    assert!(path.ends_with("000042.txt"));
    assert_eq!(std::fs::read_to_string(&path).unwrap(), golden());
    assert_eq!(read_label_file(&path).unwrap(), labels);
    let empty = write_label_file(&dir, &SoftLabelSet::new(3, vec![])).unwrap();
    assert!(read_label_file(&empty).unwrap().is_empty());
    std::fs::remove_dir_all(&dir).unwrap();
}

fn tempdir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("monosim-kitti-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn parse_error_line(text: &str) -> usize {
    match parse_kitti_labels(text, 0) {
        Err(Error::Parse { line, .. }) => line,
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn malformed_lines_are_rejected_with_their_line_number() {
    let good = golden().lines().next().unwrap().to_string();
    let cases = [
        // too few fields
        "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71",
        // too many fields
        "Car 0 0 0 1 2 3 4 1.5 1.6 3.9 0 1.6 10 0 0.5 9",
        // not a number
        "Car 0 0 0 1 2 3 4 1.5 abc 3.9 0 1.6 10 0",
        // non-finite
        "Car 0 0 0 1 2 3 4 1.5 1.6 3.9 0 1.6 inf 0",
        // unknown class
        "Tram 0 0 0 1 2 3 4 1.5 1.6 3.9 0 1.6 10 0",
        // non-integer occlusion
        "Car 0 0.5 0 1 2 3 4 1.5 1.6 3.9 0 1.6 10 0",
        // non-positive dimension
        "Car 0 0 0 1 2 3 4 1.5 0 3.9 0 1.6 10 0",
        // score outside [0, 1]
        "Car 0 0 0 1 2 3 4 1.5 1.6 3.9 0 1.6 10 0 1.5",
    ];
    for bad in cases {
        for at in [1, 3, 7] {
            let mut lines = vec![good.as_str(); 8];
            lines[at - 1] = bad;
            assert_eq!(parse_error_line(&lines.join("\n")), at, "{bad}");
        }
    }
    // blank lines are skipped but still counted
    assert_eq!(parse_error_line(&format!("{good}\n\n{}", cases[0])), 3);
}
