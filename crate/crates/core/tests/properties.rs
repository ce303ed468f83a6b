//! Property tests for the invariants each module promises.

use monosim::metrics::{average_precision, fuse_global_local, total_loss, ApOutcome, LossWeights, RecallSet};
use monosim::numerics::{FeatureMap, Tape, Tensor};
use monosim::projection::{
    compute_validity_mask, count_valid, render_points, CameraModel, PointFeatureSet, RigidTransform, ValidityMask,
};
use monosim::response::{
    emit_kitti_labels, filter_soft_labels, parse_kitti_labels, DetectionBox, ObjectClass, SoftLabelSet,
    ThresholdPolicy,
};
use monosim::roi_sim::{adaptive_avg_pool, bev_collapse, roi_loss, voxelize, Bounds, GridDims};
use monosim::scene_sim::scene_loss;
use proptest::prelude::*;

const H: usize = 12;
const W: usize = 16;

fn camera(extrinsic: RigidTransform) -> CameraModel {
    CameraModel::from_intrinsics(10.0, 10.0, W as f64 / 2.0, H as f64 / 2.0, extrinsic).unwrap()
}

/// Points in front of an identity camera, with strictly positive features so
/// every channel sum is nonzero.
fn points(max: usize) -> impl Strategy<Value = PointFeatureSet> {
    prop::collection::vec(
        ((-8.0..8.0f64, -6.0..6.0f64, 0.5..12.0f64), prop::collection::vec(0.1..2.0f64, 2)),
        0..max,
    )
    .prop_map(|pts| {
        let mut set = PointFeatureSet::empty(2);
        for ((x, y, z), f) in pts {
            set.push(&f, [x, y, z]).unwrap();
        }
        set
    })
}

/// Pixel a camera-frame point lands on, from the pinhole formula directly.
fn pixel(cam: &CameraModel, q: [f64; 3]) -> Option<(usize, usize)> {
    let p = cam.extrinsic().apply(q);
    if p[2] <= 1e-6 {
        return None;
    }
    let col = (cam.fx() * p[0] / p[2] + cam.cx()).round();
    let row = (cam.fy() * p[1] / p[2] + cam.cy()).round();
    (col >= 0.0 && row >= 0.0 && (col as usize) < W && (row as usize) < H).then(|| (row as usize, col as usize))
}

/// Rotations whose entries are 0 or ±1: applying them is exact in floating
/// point, so the invariance below can be demanded bit for bit.
fn axis_rotation() -> impl Strategy<Value = [[f64; 3]; 3]> {
    (0usize..6, any::<[bool; 3]>()).prop_map(|(perm, signs)| {
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut r = [[0.0; 3]; 3];
        for (i, &j) in PERMS[perm].iter().enumerate() {
            r[i][j] = if signs[i] { -1.0 } else { 1.0 };
        }
        r
    })
}

fn dyadic(range: std::ops::Range<i32>) -> impl Strategy<Value = f64> {
    range.prop_map(|k| k as f64 / 8.0)
}

fn feature_map(c: usize, h: usize, w: usize) -> impl Strategy<Value = FeatureMap> {
    prop::collection::vec(-3.0..3.0f64, c * h * w).prop_map(move |d| FeatureMap::new(c, h, w, d).unwrap())
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = ValidityMask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |m| ValidityMask::new(h, w, m).unwrap())
}

fn car(x: f64, z: f64, confidence: f64) -> DetectionBox {
    DetectionBox::new(ObjectClass::Car, [x, 1.6, z], [1.5, 1.6, 3.9], 0.0, confidence).unwrap()
}

/// Frames of ground-truth cars and detections scattered around them.
fn detection_case() -> impl Strategy<Value = (Vec<Vec<DetectionBox>>, Vec<Vec<DetectionBox>>)> {
    let frame = (
        prop::collection::vec((-10.0..10.0f64, 5.0..40.0f64), 0..4),
        prop::collection::vec((-10.0..10.0f64, 5.0..40.0f64, 0.0..1.0f64), 0..6),
    );
    prop::collection::vec(frame, 1..4).prop_map(|frames| {
        let mut gt = Vec::new();
        let mut dets = Vec::new();
        for (g, d) in frames {
            let g: Vec<DetectionBox> = g.into_iter().map(|(x, z)| car(x, z, 1.0)).collect();
            // half the detections sit close to a ground-truth box
            let d = d
                .into_iter()
                .enumerate()
                .map(|(i, (x, z, c))| match g.get(i) {
                    Some(t) if i % 2 == 0 => car(t.location[0] + x * 0.03, t.location[2] + z * 0.01, c),
                    _ => car(x, z, c),
                })
                .collect();
            gt.push(g);
            dets.push(d);
        }
        (dets, gt)
    })
}

fn map_scores(dets: &[Vec<DetectionBox>], f: impl Fn(f64) -> f64) -> Vec<Vec<DetectionBox>> {
    dets.iter()
        .map(|frame| {
            frame
                .iter()
                .map(|b| DetectionBox {
                    confidence: f(b.confidence),
                    ..b.clone()
                })
                .collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_marks_exactly_the_pixels_points_reach(pts in points(80)) {
        let cam = camera(RigidTransform::identity());
        let map = render_points(&pts, &cam, H, W).unwrap();
        let mask = compute_validity_mask(&map);
        let mut hit = vec![false; H * W];
        for q in pts.coordinates() {
            if let Some((r, c)) = pixel(&cam, *q) {
                hit[r * W + c] = true;
            }
        }
        prop_assert_eq!(mask.as_slice(), &hit[..]);
    }

    #[test]
    fn moving_the_world_and_the_camera_together_changes_nothing(
        pts in points(60),
        cam_rot in axis_rotation(),
        cam_t in [dyadic(-16..16), dyadic(-16..16), dyadic(-16..16)],
        rot in axis_rotation(),
        t in [dyadic(-64..64), dyadic(-64..64), dyadic(-64..64)],
    ) {
        let cam = camera(RigidTransform { rotation: cam_rot, translation: cam_t });
        let transform = RigidTransform { rotation: rot, translation: t };
        // snap coordinates to a dyadic grid so every transform is exact
        let snap = |v: f64| (v * 64.0).round() / 64.0;
        let mut before = PointFeatureSet::empty(2);
        let mut after = PointFeatureSet::empty(2);
        for i in 0..pts.len() {
            let q = pts.coordinate(i).map(snap);
            before.push(pts.feature(i), q).unwrap();
            after.push(pts.feature(i), transform.apply(q)).unwrap();
        }
        let moved = cam.with_world_transform(&transform).unwrap();
        let a = render_points(&before, &cam, H, W).unwrap();
        let b = render_points(&after, &moved, H, W).unwrap();
        prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn adding_a_point_never_shrinks_the_mask(
        pts in points(60),
        extra in (-8.0..8.0f64, -6.0..6.0f64, -2.0..12.0f64),
        feature in prop::collection::vec(0.1..2.0f64, 2),
    ) {
        let cam = camera(RigidTransform::identity());
        let before = count_valid(&compute_validity_mask(&render_points(&pts, &cam, H, W).unwrap()));
        let mut more = pts.clone();
        more.push(&feature, [extra.0, extra.1, extra.2]).unwrap();
        let after = count_valid(&compute_validity_mask(&render_points(&more, &cam, H, W).unwrap()));
        prop_assert!(after >= before);
    }

    #[test]
    fn rendering_is_pure(pts in points(60)) {
        let cam = camera(RigidTransform::identity());
        prop_assert_eq!(render_points(&pts, &cam, H, W).unwrap(), render_points(&pts, &cam, H, W).unwrap());
    }

    #[test]
    fn imitation_losses_are_nonnegative_and_vanish_on_agreement(
        student in feature_map(3, 4, 5),
        teacher in feature_map(3, 4, 5),
        m in mask(4, 5),
    ) {
        for loss in [scene_loss, roi_loss] {
            prop_assert!(loss(&student, &teacher, &m).unwrap() >= 0.0);
            // copy the teacher into every valid pixel: loss drops to zero
            let mut agree = student.clone();
            for c in 0..3 {
                for r in 0..4 {
                    for col in 0..5 {
                        if m.get(r, col) == 1 {
                            agree.set(c, r, col, teacher.get(c, r, col));
                        }
                    }
                }
            }
            prop_assert_eq!(loss(&agree, &teacher, &m).unwrap(), 0.0);
        }
    }

    #[test]
    fn masked_out_pixels_do_not_matter(
        student in feature_map(3, 4, 5),
        teacher in feature_map(3, 4, 5),
        m in mask(4, 5),
        noise in prop::collection::vec(-5.0..5.0f64, 60),
    ) {
        let mut perturbed = student.clone();
        for c in 0..3 {
            for r in 0..4 {
                for col in 0..5 {
                    if m.get(r, col) == 0 {
                        let i = perturbed.index(c, r, col);
                        perturbed.data_mut()[i] += noise[i];
                    }
                }
            }
        }
        for loss in [scene_loss, roi_loss] {
            prop_assert_eq!(
                loss(&student, &teacher, &m).unwrap().to_bits(),
                loss(&perturbed, &teacher, &m).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn scaling_both_maps_scales_the_loss(
        student in feature_map(2, 3, 4),
        teacher in feature_map(2, 3, 4),
        m in mask(3, 4),
        k in 0.01..50.0f64,
    ) {
        let scale = |f: &FeatureMap| {
            let (c, h, w) = f.dims();
            FeatureMap::new(c, h, w, f.data().iter().map(|v| v * k).collect()).unwrap()
        };
        for loss in [scene_loss, roi_loss] {
            let base = loss(&student, &teacher, &m).unwrap();
            let scaled = loss(&scale(&student), &scale(&teacher), &m).unwrap();
            prop_assert!((scaled - k * base).abs() <= 1e-12 * (k * base).abs().max(1e-300));
        }
    }

    #[test]
    fn imitation_gradient_is_sign_over_valid_count(
        student in feature_map(2, 3, 4),
        teacher in feature_map(2, 3, 4),
        m in mask(3, 4),
    ) {
        let mut tape = Tape::new();
        let s = tape.leaf(student.to_tensor());
        let loss = tape.masked_l1(s, &teacher.to_tensor(), m.as_slice()).unwrap();
        let grads = tape.backward(loss);
        let g = grads.get_or_zeros(s, student.data().len());
        let n = count_valid(&m) as f64;
        for c in 0..2 {
            for r in 0..3 {
                for col in 0..4 {
                    let i = student.index(c, r, col);
                    let d = student.data()[i] - teacher.data()[i];
                    let expected = if m.get(r, col) == 1 && d != 0.0 { d.signum() / n } else { 0.0 };
                    prop_assert_eq!(g[i], expected);
                }
            }
        }
    }

    #[test]
    fn voxelize_ignores_point_order(
        pts in prop::collection::vec(((0.0..4.0f64, 0.0..3.0f64, 0.0..2.0f64), prop::collection::vec(-1.0..1.0f64, 3)), 1..60),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let build = |order: &[usize]| {
            let mut set = PointFeatureSet::empty(3);
            for &i in order {
                let ((x, y, z), f) = &pts[i];
                set.push(f, [*x, *y, *z]).unwrap();
            }
            set
        };
        let mut order: Vec<usize> = (0..pts.len()).collect();
        let a = build(&order);
        order.shuffle(&mut monosim::numerics::seeded_rng(seed));
        let b = build(&order);
        let dims = GridDims::new(4, 3, 2).unwrap();
        let bounds = Bounds::new([0.0; 3], [4.0, 3.0, 2.0]).unwrap();
        let (ga, gb) = (voxelize(&a, dims, bounds).unwrap(), voxelize(&b, dims, bounds).unwrap());
        for x in 0..4 {
            for y in 0..3 {
                for z in 0..2 {
                    prop_assert_eq!(ga.count(x, y, z), gb.count(x, y, z));
                    for (u, v) in ga.feature(x, y, z).iter().zip(gb.feature(x, y, z)) {
                        prop_assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn bev_of_a_full_grid_keeps_the_mean(
        cells in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 2), 24),
    ) {
        // one point at every cell centre of a 4×3×2 grid
        let mut set = PointFeatureSet::empty(2);
        let mut i = 0;
        for x in 0..4 {
            for y in 0..3 {
                for z in 0..2 {
                    set.push(&cells[i], [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]).unwrap();
                    i += 1;
                }
            }
        }
        let grid = voxelize(&set, GridDims::new(4, 3, 2).unwrap(), Bounds::new([0.0; 3], [4.0, 3.0, 2.0]).unwrap()).unwrap();
        prop_assert_eq!(grid.occupied_cells(), 24);
        let bev = bev_collapse(&grid);
        for c in 0..2 {
            let cell_mean = cells.iter().map(|f| f[c]).sum::<f64>() / 24.0;
            let bev_mean = (0..4).flat_map(|x| (0..3).map(move |y| (x, y))).map(|(x, y)| bev.get(c, x, y)).sum::<f64>() / 12.0;
            prop_assert!((cell_mean - bev_mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn even_pooling_keeps_the_mean(
        (h, w, fh, fw) in (1usize..4, 1usize..4, 1usize..4, 1usize..4),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = monosim::numerics::seeded_rng(seed);
        let (a, b) = (h * fh, w * fw);
        let input = FeatureMap::new(2, a, b, (0..2 * a * b).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let pooled = adaptive_avg_pool(&input, h, w).unwrap();
        for c in 0..2 {
            let mean_in = input.data()[c * a * b..(c + 1) * a * b].iter().sum::<f64>() / (a * b) as f64;
            let mean_out = pooled.data()[c * h * w..(c + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
            prop_assert!((mean_in - mean_out).abs() <= 1e-12);
        }
    }

    #[test]
    fn raising_a_threshold_never_keeps_more(
        confidences in prop::collection::vec(0.0..=1.0f64, 0..40),
        t1 in 0.0..=1.0f64,
        t2 in 0.0..=1.0f64,
    ) {
        let boxes: Vec<DetectionBox> = confidences.iter().enumerate().map(|(i, &c)| car(i as f64, 10.0, c)).collect();
        let labels = SoftLabelSet::new(0, boxes);
        let kept = |t: f64| filter_soft_labels(&labels, &ThresholdPolicy::uniform(t).unwrap()).unwrap().len();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(kept(hi) <= kept(lo));
        prop_assert_eq!(filter_soft_labels(&labels, &ThresholdPolicy::uniform(0.0).unwrap()).unwrap(), labels);
    }

    #[test]
    fn label_text_round_trips_at_six_decimals(
        boxes in prop::collection::vec(
            (0usize..3, [-50.0..50.0f64, -3.0..3.0, 0.0..80.0], [0.3..4.0f64, 0.3..3.0, 0.3..6.0], -3.14..3.14f64, 0.0..=1.0f64),
            0..8,
        ),
    ) {
        let boxes: Vec<DetectionBox> = boxes
            .into_iter()
            .map(|(c, loc, dims, yaw, conf)| DetectionBox::new(ObjectClass::ALL[c], loc, dims, yaw, conf).unwrap())
            .filter(|b| b.dimensions.iter().all(|d| (d * 1e6).round() > 0.0))
            .collect();
        let labels = SoftLabelSet::new(3, boxes);
        let text = emit_kitti_labels(&labels);
        let parsed = parse_kitti_labels(&text, 3).unwrap();
        prop_assert_eq!(emit_kitti_labels(&parsed), text);
        for (a, b) in labels.boxes.iter().zip(&parsed.boxes) {
            prop_assert_eq!(a.class, b.class);
            let pairs = a.location.iter().chain(&a.dimensions).chain([&a.yaw, &a.confidence])
                .zip(b.location.iter().chain(&b.dimensions).chain([&b.yaw, &b.confidence]));
            for (x, y) in pairs {
                prop_assert!((x - y).abs() <= 5e-7 + 1e-12);
            }
        }
    }

    #[test]
    fn total_loss_is_linear_in_each_term(
        parts in [0.0..10.0f64, 0.0..10.0, 0.0..10.0],
        w in (0.0..3.0f64, 0.0..3.0f64),
        delta in -5.0..5.0f64,
    ) {
        let weights = LossWeights::new(w.0, w.1).unwrap();
        let [r, s, o] = parts;
        let base = total_loss(r, s, o, weights);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        prop_assert!(close(total_loss(r + delta, s, o, weights) - base, delta));
        prop_assert!(close(total_loss(r, s + delta, o, weights) - base, w.0 * delta));
        prop_assert!(close(total_loss(r, s, o + delta, weights) - base, w.1 * delta));
    }

    #[test]
    fn fusion_stays_between_its_inputs(g in -10.0..10.0f64, l in -10.0..10.0f64, raw in -30.0..30.0f64) {
        let f = fuse_global_local(g, l, raw);
        prop_assert!(f >= g.min(l) && f <= g.max(l));
    }

    #[test]
    fn ap_depends_only_on_score_order((dets, gt) in detection_case(), shift in -2.0..2.0f64) {
        for set in [RecallSet::R11, RecallSet::R40] {
            let base = average_precision(&dets, &gt, 0.5, set).unwrap();
            // strictly increasing maps onto [0, 1]
            for f in [
                Box::new(|c: f64| c * c) as Box<dyn Fn(f64) -> f64>,
                Box::new(|c: f64| c.sqrt()),
                Box::new(move |c: f64| 1.0 / (1.0 + (-(4.0 * c + shift)).exp())),
            ] {
                let mapped = average_precision(&map_scores(&dets, &f), &gt, 0.5, set).unwrap();
                match (base, mapped) {
                    (ApOutcome::Value(a), ApOutcome::Value(b)) => prop_assert_eq!(a.to_bits(), b.to_bits()),
                    (ApOutcome::Undefined(_), ApOutcome::Undefined(_)) => {}
                    other => prop_assert!(false, "outcomes differ: {:?}", other),
                }
            }
        }
    }

    #[test]
    fn a_low_scored_false_positive_never_helps((dets, gt) in detection_case(), x in -10.0..10.0f64) {
        let ApOutcome::Value(base) = average_precision(&dets, &gt, 0.5, RecallSet::R40).unwrap() else {
            return Ok(());
        };
        prop_assert!((0.0..=1.0).contains(&base));
        let lowest = dets.iter().flatten().map(|b| b.confidence).fold(1.0f64, f64::min);
        let mut more = dets.clone();
        // far from every ground-truth box, below every other score
        more[0].push(car(x, 200.0, lowest * 0.5));
        let ApOutcome::Value(after) = average_precision(&more, &gt, 0.5, RecallSet::R40).unwrap() else {
            unreachable!("ground truth unchanged");
        };
        prop_assert!(after <= base);
    }
}

#[test]
fn tape_forward_is_pure() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3, 3], (0..18).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let w = tape.leaf(Tensor::new(vec![2, 2, 3, 3], (0..36).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap());
        let b = tape.leaf(Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
        let y = tape.conv2d(x, w, b).unwrap();
        let y = tape.relu(y);
        let y = tape.adaptive_avg_pool(y, 2, 2).unwrap();
        let s = tape.sum(y);
        (tape.scalar(s).to_bits(), tape.backward(s).get_or_zeros(w, 36))
    };
    assert_eq!(run(), run());
}
